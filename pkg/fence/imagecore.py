"""
Pixel containers and file IO shared by every pipeline stage.

Images are planar (channel-major) float32 arrays with samples in [0, 1].
PNG carries visual artifacts (8 or 16 bit), PFM carries lossless floats.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .exceptions import ImageFormatError, ShapeMismatchError

logger = logging.getLogger(__name__)

HORIZONTAL = 'horizontal'
VERTICAL = 'vertical'

FRAME_FILES = {
    'left': 'left.png',
    'right': 'right.png',
    'combined': 'combined.png',
}


def _frozen(array):
    array = np.array(array, dtype=np.float32, copy=True)
    array.setflags(write=False)
    return array


def _check_range(data, what):
    if not np.all(np.isfinite(data)):
        raise ValueError(f'{what} contains non-finite samples')
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise ValueError(f'{what} samples outside [0, 1]; clip explicitly before wrapping')


@dataclass(frozen=True, eq=False)
class Image:
    """Planar raster of shape (channels, height, width), channels 1 or 3."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[np.newaxis]
        if data.ndim != 3 or data.shape[0] not in (1, 3):
            raise ShapeMismatchError(f'expected (1|3, H, W) planar data, got shape {data.shape}')
        if data.shape[1] == 0 or data.shape[2] == 0:
            raise ShapeMismatchError('image dimensions must be non-zero')
        _check_range(data, 'image')
        object.__setattr__(self, 'data', _frozen(data))

    @classmethod
    def from_array(cls, array, clip=False):
        array = np.asarray(array, dtype=np.float64)
        if clip:
            array = np.clip(array, 0.0, 1.0)
        return cls(array)

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def channel(self, index):
        return Image(self.data[index:index + 1])

    def transposed(self):
        return Image(self.data.transpose(0, 2, 1))

    def __repr__(self):
        return f'Image({self.channels}x{self.height}x{self.width})'


@dataclass(frozen=True, eq=False)
class MaskImage:
    """Soft (floats in [0, 1]) or binary (exact 0/1) mask of shape (height, width)."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3 and data.shape[0] == 1:
            data = data[0]
        if data.ndim != 2:
            raise ShapeMismatchError(f'mask must be 2-D, got shape {data.shape}')
        if data.shape[0] == 0 or data.shape[1] == 0:
            raise ShapeMismatchError('mask dimensions must be non-zero')
        _check_range(data, 'mask')
        object.__setattr__(self, 'data', _frozen(data))

    @classmethod
    def from_bool(cls, flags):
        return cls(np.asarray(flags, dtype=bool).astype(np.float32))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def is_binary(self):
        return bool(np.all((self.data == 0.0) | (self.data == 1.0)))

    @property
    def coverage(self):
        return float(np.mean(self.data, dtype=np.float64))

    def flags(self):
        return self.data >= 0.5

    def binarize(self, threshold=0.5):
        return MaskImage.from_bool(self.data >= threshold)

    def as_image(self):
        return Image(self.data[np.newaxis])

    def transposed(self):
        return MaskImage(self.data.T)

    def __repr__(self):
        return f'MaskImage({self.height}x{self.width})'


@dataclass(frozen=True, eq=False)
class DPFrame:
    """One dual-pixel capture: grayscale left/right views and the color combined view.

    Internally the disparity axis is always horizontal; `disparity_axis`
    records the orientation on disk so IO can transpose back.
    """
    left: Image
    right: Image
    combined: Image
    disparity_axis: str = HORIZONTAL

    def __post_init__(self):
        if self.left.channels != 1 or self.right.channels != 1:
            raise ShapeMismatchError('dual-pixel views must be single-channel')
        if self.combined.channels != 3:
            raise ShapeMismatchError('combined view must have 3 channels')
        dims = {img.shape[1:] for img in (self.left, self.right, self.combined)}
        if len(dims) != 1:
            raise ShapeMismatchError(f'frame views disagree on dimensions: {sorted(dims)}')
        if self.disparity_axis not in (HORIZONTAL, VERTICAL):
            raise ValueError(f'unknown disparity axis {self.disparity_axis!r}')

    @property
    def height(self):
        return self.left.height

    @property
    def width(self):
        return self.left.width

    @classmethod
    def in_focus(cls, combined):
        """Frame of an in-focus scene: both views equal the green channel."""
        green = green_channel(combined)
        return cls(green, green, combined)


def green_channel(image):
    if image.channels != 3:
        raise ShapeMismatchError('green_channel needs a 3-channel image')
    return image.channel(1)


def replicate_rgb(image):
    if image.channels != 1:
        raise ShapeMismatchError('replicate_rgb needs a single-channel image')
    return Image(np.repeat(image.data, 3, axis=0))


def _planar(obj):
    if isinstance(obj, Image):
        return obj.data
    if isinstance(obj, MaskImage):
        return obj.data[np.newaxis]
    array = np.asarray(obj, dtype=np.float32)
    if array.ndim == 2:
        array = array[np.newaxis]
    if array.ndim != 3 or array.shape[0] not in (1, 3):
        raise ShapeMismatchError(f'cannot store array of shape {array.shape}')
    return array


# ---------- PNG ----------

def load_png(path):
    path = Path(path)
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise ImageFormatError(f'cannot read {path}: {exc}') from exc
    if raw.size == 0:
        raise ImageFormatError(f'{path} is empty')
    decoded = cv2.imdecode(raw, cv2.IMREAD_UNCHANGED)
    if decoded is None:
        raise ImageFormatError(f'{path} is not a decodable image')
    if decoded.dtype == np.uint8:
        scale = 255.0
    elif decoded.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageFormatError(f'{path}: unsupported sample type {decoded.dtype}')
    if decoded.ndim == 2:
        planar = decoded[np.newaxis]
    elif decoded.ndim == 3 and decoded.shape[2] in (3, 4):
        rgb = cv2.cvtColor(decoded[:, :, :3], cv2.COLOR_BGR2RGB)
        planar = rgb.transpose(2, 0, 1)
    else:
        raise ImageFormatError(f'{path}: unsupported channel layout {decoded.shape}')
    if 0 in planar.shape:
        raise ImageFormatError(f'{path}: zero-sized image')
    return Image(planar.astype(np.float64) / scale)


def save_png(image, path, bit_depth=16):
    """Write an Image or MaskImage; samples are rounded to the nearest level."""
    if bit_depth not in (8, 16):
        raise ImageFormatError(f'unsupported PNG bit depth {bit_depth}')
    data = _planar(image).astype(np.float64)
    levels = 255.0 if bit_depth == 8 else 65535.0
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    quantized = np.round(np.clip(data, 0.0, 1.0) * levels).astype(dtype)
    if quantized.shape[0] == 3:
        pixels = cv2.cvtColor(quantized.transpose(1, 2, 0), cv2.COLOR_RGB2BGR)
    else:
        pixels = quantized[0]
    ok, encoded = cv2.imencode('.png', pixels)
    if not ok:
        raise ImageFormatError(f'PNG encoding failed for {path}')
    try:
        encoded.tofile(Path(path))
    except OSError as exc:
        raise ImageFormatError(f'cannot write {path}: {exc}') from exc


# ---------- PFM ----------

def write_pfm(array, path):
    """Store planar floats losslessly; little-endian, signalled by a negative scale."""
    planar = _planar(array).astype(np.float32)
    channels, height, width = planar.shape
    header = 'PF' if channels == 3 else 'Pf'
    # PFM rows run bottom to top with interleaved channels.
    payload = np.ascontiguousarray(planar.transpose(1, 2, 0)[::-1]).astype('<f4')
    try:
        with open(path, 'wb') as handle:
            handle.write(f'{header}\n{width} {height}\n-1.0\n'.encode('ascii'))
            handle.write(payload.tobytes())
    except OSError as exc:
        raise ImageFormatError(f'cannot write {path}: {exc}') from exc


def read_pfm(path):
    """Read a PFM file into a planar float32 array of shape (C, H, W)."""
    try:
        with open(path, 'rb') as handle:
            magic = handle.readline().strip()
            dims = handle.readline().split()
            scale_line = handle.readline().strip()
            payload = handle.read()
    except OSError as exc:
        raise ImageFormatError(f'cannot read {path}: {exc}') from exc

    if magic == b'PF':
        channels = 3
    elif magic == b'Pf':
        channels = 1
    else:
        raise ImageFormatError(f'{path}: bad PFM magic {magic!r}')
    try:
        width, height = (int(token) for token in dims)
        scale = float(scale_line)
    except ValueError as exc:
        raise ImageFormatError(f'{path}: malformed PFM header') from exc
    if width <= 0 or height <= 0 or scale == 0.0:
        raise ImageFormatError(f'{path}: malformed PFM header')

    expected = width * height * channels * 4
    if len(payload) < expected:
        raise ImageFormatError(f'{path}: truncated payload ({len(payload)} of {expected} bytes)')
    if len(payload) > expected:
        if channels == 1 and len(payload) == 3 * expected:
            raise ImageFormatError(f'{path}: channel/header mismatch, "Pf" header with 3-channel data')
        raise ImageFormatError(f'{path}: {len(payload) - expected} trailing bytes after payload')

    dtype = '<f4' if scale < 0 else '>f4'
    pixels = np.frombuffer(payload, dtype=dtype).reshape(height, width, channels)[::-1]
    return np.ascontiguousarray(pixels.transpose(2, 0, 1)).astype(np.float32)


def load_pfm(path):
    return Image(read_pfm(path))


def save_pfm(image, path):
    write_pfm(image, path)


# ---------- dual-pixel frames ----------

def save_frame(frame, directory, bit_depth=16):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, filename in FRAME_FILES.items():
        view = getattr(frame, name)
        if frame.disparity_axis == VERTICAL:
            view = view.transposed()
        save_png(view, directory / filename, bit_depth=bit_depth)
    return directory


def load_frame(directory, disparity_axis=HORIZONTAL):
    """Load `left.png`, `right.png`, `combined.png`; vertical frames are transposed."""
    directory = Path(directory)
    views = {}
    for name, filename in FRAME_FILES.items():
        view = load_png(directory / filename)
        if name == 'combined' and view.channels == 1:
            view = replicate_rgb(view)
        if name != 'combined' and view.channels == 3:
            view = green_channel(view)
        if disparity_axis == VERTICAL:
            view = view.transposed()
        views[name] = view
    logger.debug('loaded frame %s (%dx%d)', directory, views['left'].width, views['left'].height)
    return DPFrame(disparity_axis=disparity_axis, **views)
