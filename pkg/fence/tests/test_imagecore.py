import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from numpy.testing import assert_allclose, assert_array_equal

from fence.exceptions import ImageFormatError, ShapeMismatchError
from fence.imagecore import (
    DPFrame,
    Image,
    MaskImage,
    VERTICAL,
    green_channel,
    load_frame,
    load_pfm,
    load_png,
    read_pfm,
    replicate_rgb,
    save_frame,
    save_pfm,
    save_png,
    write_pfm,
)

unit_floats = st.floats(0.0, 1.0, allow_nan=False, width=32)


class ImageTypeTests(SimpleTestCase):
    def test_rejects_samples_outside_unit_range(self):
        with self.assertRaises(ValueError):
            Image(np.full((1, 2, 2), 1.5))
        with self.assertRaises(ValueError):
            Image(np.full((1, 2, 2), np.nan))

    def test_from_array_clips_on_request(self):
        image = Image.from_array(np.array([[[-0.5, 2.0]]]), clip=True)
        assert_array_equal(image.data, [[[0.0, 1.0]]])

    def test_rejects_two_channel_data(self):
        with self.assertRaises(ShapeMismatchError):
            Image(np.zeros((2, 4, 4)))

    def test_data_is_read_only(self):
        image = Image(np.zeros((1, 2, 2)))
        with self.assertRaises(ValueError):
            image.data[0, 0, 0] = 1.0

    def test_mask_binarize_and_coverage(self):
        mask = MaskImage(np.array([[0.2, 0.5], [0.7, 0.0]]))
        self.assertFalse(mask.is_binary)
        binary = mask.binarize()
        self.assertTrue(binary.is_binary)
        self.assertEqual(binary.coverage, 0.5)

    def test_frame_views_must_agree(self):
        gray = Image(np.zeros((1, 4, 4)))
        with self.assertRaises(ShapeMismatchError):
            DPFrame(gray, Image(np.zeros((1, 4, 5))), Image(np.zeros((3, 4, 4))))


class ChannelTests(SimpleTestCase):
    def test_green_channel_of_pure_green(self):
        image = Image(np.stack([np.zeros((2, 2)), np.ones((2, 2)), np.zeros((2, 2))]))
        assert_array_equal(green_channel(image).data, np.ones((1, 2, 2)))

    def test_green_channel_of_mixed_pixel(self):
        image = Image(np.array([0.2, 0.4, 0.6]).reshape(3, 1, 1))
        self.assertAlmostEqual(float(green_channel(image).data[0, 0, 0]), 0.4, places=6)

    def test_green_of_replicated_gray_is_identity(self):
        gray = Image(np.random.default_rng(1).random((1, 5, 7)))
        assert_array_equal(green_channel(replicate_rgb(gray)).data, gray.data)

    def test_green_channel_needs_rgb(self):
        with self.assertRaises(ShapeMismatchError):
            green_channel(Image(np.zeros((1, 2, 2))))


class PNGTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def test_sixteen_bit_round_trip_within_one_level(self):
        image = Image(np.full((3, 2, 2), 0.5))
        save_png(image, self.root / 'half.png')
        loaded = load_png(self.root / 'half.png')
        self.assertEqual(loaded.shape, (3, 2, 2))
        self.assertLessEqual(np.max(np.abs(loaded.data - 0.5)), 1 / 65535)

    def test_zero_pixel_is_exact(self):
        save_png(Image(np.zeros((1, 1, 1))), self.root / 'zero.png')
        self.assertEqual(float(load_png(self.root / 'zero.png').data[0, 0, 0]), 0.0)

    def test_ramp_stays_monotone(self):
        ramp = Image(np.linspace(0.0, 1.0, 300).reshape(1, 1, 300))
        save_png(ramp, self.root / 'ramp.png')
        loaded = load_png(self.root / 'ramp.png').data[0, 0]
        self.assertTrue(np.all(np.diff(loaded) >= 0))

    def test_color_order_survives(self):
        rgb = Image(np.array([1.0, 0.0, 0.0]).reshape(3, 1, 1))
        save_png(rgb, self.root / 'red.png', bit_depth=8)
        assert_array_equal(load_png(self.root / 'red.png').data[:, 0, 0], [1.0, 0.0, 0.0])

    def test_garbage_file_raises_format_error(self):
        path = self.root / 'broken.png'
        path.write_bytes(b'definitely not a png')
        with self.assertRaises(ImageFormatError):
            load_png(path)

    def test_missing_file_raises_format_error(self):
        with self.assertRaises(ImageFormatError):
            load_png(self.root / 'absent.png')


class PFMTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def test_random_grayscale_is_bit_identical(self):
        data = np.random.default_rng(0).random((1, 8, 8)).astype(np.float32)
        save_pfm(Image(data), self.root / 'gray.pfm')
        assert_array_equal(load_pfm(self.root / 'gray.pfm').data, data)

    def test_tiny_value_is_preserved(self):
        save_pfm(Image(np.full((1, 1, 1), 1e-30)), self.root / 'tiny.pfm')
        self.assertEqual(read_pfm(self.root / 'tiny.pfm')[0, 0, 0], np.float32(1e-30))

    def test_color_and_signed_values(self):
        data = np.random.default_rng(1).standard_normal((3, 4, 6)).astype(np.float32)
        write_pfm(data, self.root / 'signed.pfm')
        assert_array_equal(read_pfm(self.root / 'signed.pfm'), data)

    def test_rows_are_stored_bottom_up(self):
        write_pfm(np.array([[0.25], [0.75]], dtype=np.float32), self.root / 'order.pfm')
        payload = (self.root / 'order.pfm').read_bytes().split(b'\n', 3)[3]
        assert_array_equal(np.frombuffer(payload, dtype='<f4'), [0.75, 0.25])

    @given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6), elements=unit_floats))
    def test_round_trip_property(self, data):
        path = self.root / 'prop.pfm'
        write_pfm(data, path)
        assert_array_equal(read_pfm(path)[0], data)

    def test_header_channel_mismatch(self):
        path = self.root / 'mismatch.pfm'
        path.write_bytes(b'Pf\n2 2\n-1.0\n' + np.zeros(12, dtype='<f4').tobytes())
        with self.assertRaisesRegex(ImageFormatError, 'mismatch'):
            read_pfm(path)

    def test_truncated_payload(self):
        path = self.root / 'short.pfm'
        path.write_bytes(b'PF\n4 4\n-1.0\n' + np.zeros(10, dtype='<f4').tobytes())
        with self.assertRaisesRegex(ImageFormatError, 'truncated'):
            read_pfm(path)

    def test_bad_magic(self):
        path = self.root / 'magic.pfm'
        path.write_bytes(b'P6\n1 1\n255\n\x00\x00\x00')
        with self.assertRaises(ImageFormatError):
            read_pfm(path)

    def test_big_endian_payload(self):
        path = self.root / 'big.pfm'
        path.write_bytes(b'Pf\n2 1\n1.0\n' + np.array([0.5, 0.25], dtype='>f4').tobytes())
        assert_array_equal(read_pfm(path), [[[0.5, 0.25]]])


class FrameIOTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        rng = np.random.default_rng(3)
        self.combined = Image(rng.random((3, 6, 10)))

    def test_frame_round_trip(self):
        frame = DPFrame.in_focus(self.combined)
        save_frame(frame, self.root / 'frame')
        loaded = load_frame(self.root / 'frame')
        self.assertEqual(loaded.left.shape, (1, 6, 10))
        assert_allclose(loaded.combined.data, self.combined.data, atol=1 / 65535)

    def test_vertical_frames_are_transposed_internally(self):
        save_frame(DPFrame.in_focus(self.combined), self.root / 'frame')
        loaded = load_frame(self.root / 'frame', VERTICAL)
        self.assertEqual(loaded.disparity_axis, VERTICAL)
        self.assertEqual(loaded.left.shape, (1, 10, 6))
        save_frame(loaded, self.root / 'back')
        self.assertEqual(load_png(self.root / 'back' / 'left.png').shape, (1, 6, 10))

    def test_missing_view_raises(self):
        save_frame(DPFrame.in_focus(self.combined), self.root / 'frame')
        (self.root / 'frame' / 'right.png').unlink()
        with self.assertRaises(ImageFormatError):
            load_frame(self.root / 'frame')
