import io
import json
import tempfile
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from dp_defence.cli import main
from fence.dpform import expected_disparity, form_dp_views, load_psf_grid
from fence.imagecore import VERTICAL, DPFrame, load_png, read_pfm, save_frame
from fence.reporting import REPORT_NAME

from .scenes import fenced_frame, random_blocks, write_inputs

SMALL_SYNTH = {'synth': {'lens': {'blur_constant': 0.5}, 'grid_shape': [2, 2]}}


def run_cli(*argv):
    """(exit code, stdout, stderr) of one `dp-defence` invocation."""
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main([str(arg) for arg in argv])
    return code, out.getvalue(), err.getvalue()


def read_report(directory):
    return json.loads((Path(directory) / REPORT_NAME).read_text())


class CLITestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def assertSucceeds(self, *argv):
        code, out, err = run_cli(*argv)
        self.assertEqual(code, 0, err)
        return out

    def write_config(self, data, name='config.json'):
        path = self.root / name
        path.write_text(json.dumps(data))
        return path


class DispatchTests(CLITestCase):
    def test_no_arguments_prints_usage(self):
        code, _, err = run_cli()
        self.assertEqual(code, 2)
        self.assertIn('usage: dp-defence', err)

    def test_help_lists_every_subcommand(self):
        out = self.assertSucceeds('--help')
        for name in ('synth', 'disparity', 'segment', 'remove', 'eval', 'psf-preview'):
            self.assertIn(name, out)

    def test_unknown_subcommand(self):
        code, _, err = run_cli('denoise')
        self.assertEqual(code, 2)
        self.assertIn("unknown subcommand 'denoise'", err)

    def test_unknown_flag_is_a_usage_error(self):
        code, _, _ = run_cli('psf-preview', '--alpha', '2', '--out', self.root, '--bogus')
        self.assertEqual(code, 2)

    def test_subcommand_help(self):
        out = self.assertSucceeds('synth', '--help')
        self.assertIn('--assets', out)


class SynthCommandTests(CLITestCase):
    def setUp(self):
        super().setUp()
        self.clean_dir, self.assets_dir = write_inputs(self.root)
        self.config = self.write_config(SMALL_SYNTH)

    def synth(self, name, *extra):
        out_dir = self.root / name
        self.assertSucceeds('synth', '--clean', self.clean_dir, '--assets', self.assets_dir, '--out', out_dir,
                            '--n', 2, '--seed', 3, '--config', self.config, *extra)
        return out_dir

    def test_writes_manifest_and_report(self):
        out_dir = self.synth('data')
        manifest = json.loads((out_dir / 'manifest.json').read_text())
        report = read_report(out_dir)
        self.assertEqual(manifest['config']['base_seed'], 3)
        self.assertEqual(report['subcommand'], 'synth')
        self.assertEqual(report['config_hash'], manifest['config_hash'])
        self.assertIn('manifest.json', report['outputs'])
        self.assertEqual(report['config']['synth']['grid_shape'], [2, 2])

    def test_output_hashes_do_not_depend_on_threads(self):
        serial = read_report(self.synth('serial', '--threads', 1))
        parallel = read_report(self.synth('parallel', '--threads', 4))
        self.assertEqual(serial['outputs'], parallel['outputs'])

    def test_patch_export(self):
        out_dir = self.synth('patched', '--patches', '--patch', 32, '--stride', 32)
        manifest = json.loads((out_dir / 'manifest.json').read_text())
        self.assertEqual(manifest['patch'], {'size': 32, 'stride': 32})
        self.assertEqual(len(manifest['records'][0]['patches']), 4)

    def test_unknown_config_key_fails(self):
        config = self.write_config({'synth': {'lense': {}}}, 'bad.json')
        code, _, err = run_cli('synth', '--clean', self.clean_dir, '--assets', self.assets_dir,
                               '--out', self.root / 'out', '--n', 1, '--config', config)
        self.assertEqual(code, 1)
        self.assertIn('invalid configuration', err)
        self.assertIn('lense', err)

    def test_malformed_config_file(self):
        config = self.root / 'broken.json'
        config.write_text('{"synth": ')
        code, _, err = run_cli('synth', '--clean', self.clean_dir, '--assets', self.assets_dir,
                               '--out', self.root / 'out', '--n', 1, '--config', config)
        self.assertEqual(code, 1)
        self.assertIn('not valid JSON', err)

    def test_threads_must_be_positive(self):
        code, _, _ = run_cli('synth', '--clean', self.clean_dir, '--assets', self.assets_dir,
                             '--out', self.root / 'out', '--n', 1, '--threads', 0)
        self.assertEqual(code, 1)

    def test_missing_clean_frames(self):
        empty = self.root / 'empty'
        empty.mkdir()
        code, _, err = run_cli('synth', '--clean', empty, '--assets', self.assets_dir,
                               '--out', self.root / 'out', '--n', 1)
        self.assertEqual(code, 1)
        self.assertIn('no clean frames', err)


class PSFPreviewCommandTests(CLITestCase):
    def test_heatmaps_and_grids(self):
        out_dir = self.root / 'psf'
        out = self.assertSucceeds('psf-preview', '--alpha', 3, '--out', out_dir, '--grid', '--grid-shape', 2, 2)
        for view in ('L', 'R', 'C'):
            self.assertTrue((out_dir / f'k_{view}.png').exists())
            grid = load_psf_grid(out_dir / f'psf_{view}.dppg')
            self.assertEqual(grid.grid_shape, (2, 2))
        report = read_report(out_dir)
        self.assertAlmostEqual(report['expected_disparity'], expected_disparity(3.0))
        self.assertEqual(report['radius'], 3)
        self.assertIn('expected disparity', out)


class DisparityCommandTests(CLITestCase):
    def setUp(self):
        super().setUp()
        self.frame = form_dp_views(random_blocks(np.random.default_rng(4), 64, 96), 3.0, (2, 2))

    def test_maps_are_written_at_half_resolution(self):
        frame_dir = save_frame(self.frame, self.root / 'frame')
        out_dir = self.root / 'disparity'
        self.assertSucceeds('disparity', '--frame', frame_dir, '--out', out_dir, '--dump-volume')
        disparity = read_pfm(out_dir / 'disparity.pfm')[0]
        confidence = read_pfm(out_dir / 'confidence.pfm')[0]
        self.assertEqual(disparity.shape, (32, 48))
        self.assertEqual(confidence.shape, (32, 48))
        self.assertTrue(np.all((disparity >= 0) & (disparity <= 8)))
        for name in ('disparity.png', 'confidence.png', 'cost_volume.pfm', 'cost_volume.json'):
            self.assertTrue((out_dir / name).exists(), name)
        self.assertIn('median_disparity', read_report(out_dir)['stats'])

    def test_vertical_frames_match_the_horizontal_result(self):
        horizontal_dir = save_frame(self.frame, self.root / 'horizontal')
        vertical = DPFrame(self.frame.left, self.frame.right, self.frame.combined, VERTICAL)
        vertical_dir = save_frame(vertical, self.root / 'vertical')
        self.assertSucceeds('disparity', '--frame', horizontal_dir, '--out', self.root / 'h')
        self.assertSucceeds('disparity', '--frame', vertical_dir, '--out', self.root / 'v', '--vertical')
        horizontal = read_pfm(self.root / 'h' / 'disparity.pfm')[0]
        transposed = read_pfm(self.root / 'v' / 'disparity.pfm')[0]
        self.assertEqual(transposed.shape, (48, 32))
        assert_array_equal(transposed, horizontal.T)

    def test_flags_override_the_config_file(self):
        frame_dir = save_frame(self.frame, self.root / 'frame')
        config = self.write_config({'cost_volume': {'d_max': 6.0, 'step': 0.5}})
        self.assertSucceeds('disparity', '--frame', frame_dir, '--out', self.root / 'out', '--config', config,
                            '--dmax', 4)
        echoed = read_report(self.root / 'out')['config']['cost_volume']
        self.assertEqual(echoed, {'d_max': 4.0, 'step': 0.5, 'window': 3})

    def test_even_window_is_rejected(self):
        frame_dir = save_frame(self.frame, self.root / 'frame')
        code, _, err = run_cli('disparity', '--frame', frame_dir, '--out', self.root / 'out', '--window', 4)
        self.assertEqual(code, 1)
        self.assertIn('window', err)

    def test_missing_frame_directory(self):
        code, _, _ = run_cli('disparity', '--frame', self.root / 'nowhere', '--out', self.root / 'out')
        self.assertEqual(code, 1)


class SegmentAndRemoveCommandTests(CLITestCase):
    def test_segment_writes_a_binary_mask(self):
        occluded, _, _ = fenced_frame(seed=1, size=128, alpha=4.0, bars=((24, 72),))
        frame_dir = save_frame(occluded, self.root / 'frame')
        out_dir = self.root / 'seg'
        self.assertSucceeds('segment', '--frame', frame_dir, '--out', out_dir, '--cues', 'dual')
        mask = load_png(out_dir / 'mask.png')
        self.assertEqual(mask.shape, (1, 128, 128))
        self.assertTrue(np.all((mask.data == 0) | (mask.data == 1)))
        report = read_report(out_dir)
        self.assertGreater(report['mask_coverage'], 0.0)
        self.assertEqual(report['config']['segment']['cues'], 'dual')

    def test_top_level_cost_volume_reaches_segmentation(self):
        occluded, _, _ = fenced_frame(seed=1, size=128, alpha=4.0, bars=((24, 72),))
        frame_dir = save_frame(occluded, self.root / 'frame')
        shared = self.write_config({'cost_volume': {'d_max': 4.0, 'step': 0.5}}, 'shared.json')
        nested = self.write_config({'cost_volume': {'d_max': 4.0, 'step': 0.5},
                                    'segment': {'cost_volume': {'step': 1.0}}}, 'nested.json')
        for subcommand in ('segment', 'remove'):
            with self.subTest(subcommand=subcommand):
                self.assertSucceeds(subcommand, '--frame', frame_dir, '--out', self.root / subcommand,
                                    '--config', shared)
                echoed = read_report(self.root / subcommand)['config']['segment']['cost_volume']
                self.assertEqual(echoed, {'d_max': 4.0, 'step': 0.5, 'window': 3})
        self.assertSucceeds('segment', '--frame', frame_dir, '--out', self.root / 'nested', '--config', nested)
        echoed = read_report(self.root / 'nested')['config']['segment']['cost_volume']
        self.assertEqual(echoed, {'d_max': 4.0, 'step': 1.0, 'window': 3})

    def test_remove_leaves_an_unfenced_frame_alone(self):
        frame = DPFrame.in_focus(random_blocks(np.random.default_rng(6), 64, 64))
        frame_dir = save_frame(frame, self.root / 'frame')
        out_dir = self.root / 'removed'
        self.assertSucceeds('remove', '--frame', frame_dir, '--out', out_dir)
        assert_array_equal(load_png(out_dir / 'restored.png').data, load_png(frame_dir / 'combined.png').data)
        assert_array_equal(load_png(out_dir / 'mask.png').data, 0.0)

    def test_remove_needs_a_source(self):
        code, _, _ = run_cli('remove', '--out', self.root / 'out')
        self.assertEqual(code, 2)


class DatasetRoundTripTests(CLITestCase):
    def setUp(self):
        super().setUp()
        clean_dir, assets_dir = write_inputs(self.root)
        self.data = self.root / 'data'
        self.assertSucceeds('synth', '--clean', clean_dir, '--assets', assets_dir, '--out', self.data, '--n', 2,
                            '--config', self.write_config(SMALL_SYNTH))
        self.manifest = self.data / 'manifest.json'

    def test_remove_then_eval(self):
        pred = self.root / 'pred'
        self.assertSucceeds('remove', '--manifest', self.manifest, '--out', pred, '--threads', 2)
        for sample_id in ('000000', '000001'):
            self.assertTrue((pred / sample_id / 'mask.png').exists())
            self.assertTrue((pred / sample_id / 'restored.png').exists())

        report_path = self.root / 'eval' / 'report.json'
        out = self.assertSucceeds('eval', '--manifest', self.manifest, '--pred', pred, '--out', report_path)
        self.assertIn('Segmentation', out)
        report = json.loads(report_path.read_text())
        self.assertEqual([s['sample_id'] for s in report['samples']], ['000000', '000001'])
        run = read_report(report_path.parent)
        self.assertEqual(list(run['outputs']), ['report.json'])

    def test_eval_reports_missing_predictions(self):
        pred = self.root / 'pred'
        pred.mkdir()
        code, _, err = run_cli('eval', '--manifest', self.manifest, '--pred', pred, '--out', self.root / 'r.json')
        self.assertEqual(code, 1)
        self.assertIn('000000', err)
