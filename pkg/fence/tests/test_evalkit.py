import json
import shutil
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from fence.evalkit import (
    PSNR_CAP,
    SSIM_K1,
    evaluate_dataset,
    format_tables,
    gaussian_window,
    histogram_match,
    masked_psnr,
    precision_recall_f1,
    psnr,
    ssim,
    ssim_map,
)
from fence.exceptions import MissingPredictionsError, ShapeMismatchError
from fence.imagecore import Image, MaskImage
from fence.synthpipe import generate_dataset, load_assets, load_clean_frames

from .scenes import small_config, write_inputs


def mask(rows):
    return MaskImage(np.array(rows, dtype=np.float32))


class SegmentationMetricTests(SimpleTestCase):
    def test_counts_and_scores(self):
        metrics = precision_recall_f1(mask([[1, 1], [0, 0]]), mask([[1, 0], [1, 0]]))
        self.assertEqual((metrics.tp, metrics.fp, metrics.fn), (1, 1, 1))
        self.assertEqual((metrics.precision, metrics.recall, metrics.f1), (0.5, 0.5, 0.5))
        self.assertFalse(metrics.zero_division)

    def test_half_recall_closed_form(self):
        metrics = precision_recall_f1(mask([[1, 0, 0, 0]]), mask([[1, 1, 0, 0]]))
        self.assertEqual((metrics.precision, metrics.recall), (1.0, 0.5))
        self.assertAlmostEqual(metrics.f1, 2 / 3, places=12)

    def test_perfect_prediction(self):
        truth = mask([[1, 0, 1], [0, 1, 0]])
        metrics = precision_recall_f1(truth, truth)
        self.assertEqual(metrics.f1, 1.0)

    def test_empty_masks_report_zero_division(self):
        empty = mask([[0, 0], [0, 0]])
        metrics = precision_recall_f1(empty, empty)
        self.assertTrue(metrics.zero_division)
        self.assertEqual((metrics.precision, metrics.recall, metrics.f1), (0.0, 0.0, 0.0))

    def test_missed_fence_scores_zero(self):
        metrics = precision_recall_f1(mask([[0, 0]]), mask([[1, 0]]))
        self.assertEqual(metrics.recall, 0.0)
        self.assertTrue(metrics.zero_division)

    def test_soft_masks_are_rejected(self):
        with self.assertRaises(ValueError):
            precision_recall_f1(mask([[0.5, 1]]), mask([[1, 0]]))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            precision_recall_f1(mask([[1, 0]]), mask([[1], [0]]))


class PSNRTests(SimpleTestCase):
    def test_known_value(self):
        self.assertAlmostEqual(psnr(Image(np.zeros((3, 8, 8))), Image(np.full((3, 8, 8), 0.1))), 20.0, places=5)

    def test_identical_images_hit_the_cap(self):
        image = Image(np.random.default_rng(0).random((3, 8, 8)))
        self.assertEqual(psnr(image, image), PSNR_CAP)

    def test_more_noise_lowers_psnr(self):
        rng = np.random.default_rng(1)
        clean = rng.uniform(0.2, 0.8, (3, 32, 32))
        noise = rng.standard_normal(clean.shape)
        scores = [psnr(Image(clean), Image(np.clip(clean + sigma * noise, 0, 1))) for sigma in (0.01, 0.03, 0.1)]
        self.assertTrue(scores[0] > scores[1] > scores[2])

    def test_masked_psnr_only_sees_flagged_pixels(self):
        clean = np.full((3, 8, 8), 0.5)
        noisy = clean.copy()
        noisy[:, :, :4] = 0.6
        flags = np.zeros((8, 8), dtype=bool)
        flags[:, 4:] = True
        self.assertEqual(masked_psnr(Image(noisy), Image(clean), MaskImage.from_bool(flags)), PSNR_CAP)
        self.assertAlmostEqual(masked_psnr(Image(noisy), Image(clean), MaskImage.from_bool(~flags)), 20.0, places=4)

    def test_masked_psnr_of_empty_mask(self):
        image = Image(np.zeros((3, 4, 4)))
        self.assertIsNone(masked_psnr(image, image, MaskImage(np.zeros((4, 4)))))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            psnr(Image(np.zeros((3, 4, 4))), Image(np.zeros((3, 4, 5))))


class SSIMTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(2)

    def test_window_is_normalised(self):
        taps = gaussian_window()
        self.assertEqual(taps.size, 11)
        self.assertAlmostEqual(taps.sum(), 1.0, places=12)
        self.assertEqual(int(np.argmax(taps)), 5)

    def test_identical_images_score_one(self):
        image = Image(self.rng.random((3, 24, 24)))
        self.assertAlmostEqual(ssim(image, image), 1.0, places=9)

    def test_map_covers_interior_windows(self):
        image = Image(self.rng.random((3, 24, 30)))
        self.assertEqual(ssim_map(image, image).shape, (3, 14, 20))

    def test_constant_images_reduce_to_the_luminance_term(self):
        c1 = SSIM_K1 ** 2
        score = ssim(Image(np.zeros((1, 16, 16))), Image(np.ones((1, 16, 16))))
        self.assertAlmostEqual(score, c1 / (1 + c1), places=6)

    def test_matches_a_direct_window_sum(self):
        first = Image(self.rng.random((1, 16, 16)))
        second = Image(np.clip(first.data + 0.1 * self.rng.standard_normal(first.shape), 0, 1))
        x, y = first.data.astype(np.float64), second.data.astype(np.float64)
        window = np.outer(gaussian_window(), gaussian_window())
        c1, c2 = 0.01 ** 2, 0.03 ** 2
        fast = ssim_map(first, second)
        for i, j in ((0, 0), (2, 3), (5, 5)):
            px = x[0, i:i + 11, j:j + 11]
            py = y[0, i:i + 11, j:j + 11]
            mu_x, mu_y = np.sum(window * px), np.sum(window * py)
            var_x = np.sum(window * (px - mu_x) ** 2)
            var_y = np.sum(window * (py - mu_y) ** 2)
            cov = np.sum(window * (px - mu_x) * (py - mu_y))
            expected = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
            self.assertAlmostEqual(float(fast[0, i, j]), float(expected), delta=1e-7)

    def test_noise_lowers_ssim(self):
        image = Image(self.rng.uniform(0.2, 0.8, (3, 32, 32)))
        noisy = Image(np.clip(image.data + 0.1 * self.rng.standard_normal(image.shape), 0, 1))
        self.assertLess(ssim(image, noisy), ssim(image, image))

    def test_image_smaller_than_window(self):
        with self.assertRaises(ShapeMismatchError):
            ssim(Image(np.zeros((3, 8, 8))), Image(np.zeros((3, 8, 8))))


class HistogramMatchTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(3)

    def test_matching_to_itself_is_near_identity(self):
        image = Image(self.rng.random((3, 32, 32)))
        assert_allclose(histogram_match(image, image).data, image.data, atol=1 / 1024)

    def test_mapping_is_monotone(self):
        ramp = Image(np.tile(np.linspace(0, 1, 64), (1, 8, 1)))
        reference = Image(self.rng.uniform(0.3, 0.9, (1, 32, 32)))
        matched = histogram_match(ramp, reference).data[0, 0]
        self.assertTrue(np.all(np.diff(matched) >= 0))

    def test_output_follows_the_reference_distribution(self):
        source = Image(self.rng.random((3, 64, 64)))
        reference = Image(self.rng.uniform(0.5, 1.0, (3, 64, 64)))
        matched = histogram_match(source, reference)
        self.assertAlmostEqual(float(matched.data.mean()), 0.75, delta=0.01)
        self.assertGreaterEqual(float(matched.data.min()), 0.5 - 1 / 1024)

    def test_channel_counts_must_agree(self):
        with self.assertRaises(ShapeMismatchError):
            histogram_match(Image(np.zeros((3, 4, 4))), Image(np.zeros((1, 4, 4))))


class DatasetEvaluationTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        root = Path(cls.tmp.name)
        clean_dir, assets_dir = write_inputs(root)
        generate_dataset(load_clean_frames(clean_dir), load_assets(assets_dir), small_config(), 2, root / 'data')
        cls.manifest_path = root / 'data' / 'manifest.json'
        cls.records = json.loads(cls.manifest_path.read_text())['records']
        cls.predictions = root / 'pred'
        for record in cls.records:
            target = cls.predictions / record['sample_id']
            target.mkdir(parents=True)
            shutil.copy(root / 'data' / record['files']['mask'], target / 'mask.png')
            shutil.copy(root / 'data' / record['files']['clean'] / 'combined.png', target / 'restored.png')

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_ground_truth_predictions_score_perfectly(self):
        report = evaluate_dataset(self.manifest_path, self.predictions)
        self.assertEqual([s['sample_id'] for s in report['samples']], [r['sample_id'] for r in self.records])
        mean = report['mean']
        self.assertEqual(mean['f1'], 1.0)
        self.assertEqual(mean['psnr'], PSNR_CAP)
        self.assertAlmostEqual(mean['ssim'], 1.0, places=6)
        self.assertLess(mean['occluded_psnr'], PSNR_CAP)

    def test_histogram_matching_keeps_restorations_close(self):
        report = evaluate_dataset(self.manifest_path, self.predictions, match_histograms=True)
        self.assertTrue(report['histogram_matched'])
        self.assertGreater(report['mean']['psnr'], 60.0)

    def test_thread_count_does_not_change_the_report(self):
        self.assertEqual(evaluate_dataset(self.manifest_path, self.predictions, threads=1),
                         evaluate_dataset(self.manifest_path, self.predictions, threads=3))

    def test_missing_predictions_are_listed(self):
        with tempfile.TemporaryDirectory() as tmp:
            partial = Path(tmp)
            first = self.records[0]['sample_id']
            shutil.copytree(self.predictions / first, partial / first)
            with self.assertRaises(MissingPredictionsError) as caught:
                evaluate_dataset(self.manifest_path, partial)
        self.assertEqual(caught.exception.sample_ids, [self.records[1]['sample_id']])

    def test_tables_list_every_sample_and_the_mean(self):
        tables = format_tables(evaluate_dataset(self.manifest_path, self.predictions))
        self.assertIn('Segmentation', tables)
        self.assertIn('Restoration', tables)
        for record in self.records:
            self.assertEqual(tables.count(record['sample_id']), 2)
        self.assertEqual(tables.count('\nmean'), 2)
