"""
Dual-pixel image formation.

A point at depth d is blurred by a half-aperture PSF in each dual-pixel
view and by the full aperture in the combined view, with
k_C = (k_L + k_R) / 2. The blur scale follows the thin-lens law
alpha = c * |1/d_focus - 1/d|. PSFs are stored on a grid of image cells so a
calibrated, spatially varying set can replace the parametric model.
"""
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

from .exceptions import ImageFormatError, ShapeMismatchError
from .imagecore import DPFrame, Image, green_channel
from .parallel import ordered_map

logger = logging.getLogger(__name__)

VIEWS = ('L', 'R', 'C')
DEFAULT_GRID_SHAPE = (6, 8)

# DPPG grid file: magic, version, grid_rows, grid_cols, radius, view tag.
GRID_MAGIC = b'DPPG'
GRID_VERSION = 1
_GRID_HEADER = struct.Struct('<4sHHHHB')
_VIEW_TAGS = {'L': 0, 'R': 1, 'C': 2}

_ZERO_SNAP = 1e-12


@dataclass(frozen=True)
class ThinLens:
    """Thin-lens blur law; `d_focus` in meters (inf for a distant focus)."""
    d_focus: float = math.inf
    blur_constant: float = 1.0

    def __post_init__(self):
        if not self.blur_constant > 0:
            raise ValueError('blur constant must be positive')
        if not self.d_focus > 0:
            raise ValueError('focus distance must be positive')


def blur_scale(lens, d):
    if not d > 0:
        raise ValueError(f'depth must be positive, got {d}')
    inverse_focus = 0.0 if math.isinf(lens.d_focus) else 1.0 / lens.d_focus
    return lens.blur_constant * abs(inverse_focus - 1.0 / d)


@dataclass(frozen=True, eq=False)
class PSFKernel:
    taps: np.ndarray

    def __post_init__(self):
        taps = np.array(self.taps, dtype=np.float64, copy=True)
        if taps.ndim != 2 or taps.shape[0] != taps.shape[1] or taps.shape[0] % 2 != 1:
            raise ShapeMismatchError(f'kernel must be square with odd size, got {taps.shape}')
        if np.any(taps < 0):
            raise ValueError('kernel taps must be non-negative')
        if abs(taps.sum() - 1.0) > 1e-6:
            raise ValueError(f'kernel taps sum to {taps.sum()}, expected 1')
        taps.setflags(write=False)
        object.__setattr__(self, 'taps', taps)

    @classmethod
    def delta(cls):
        return cls(np.ones((1, 1)))

    @classmethod
    def normalized(cls, weights):
        weights = np.clip(np.asarray(weights, dtype=np.float64), 0.0, None)
        total = weights.sum()
        if total <= 0:
            return cls.delta()
        return cls(weights / total)

    @property
    def radius(self):
        return self.taps.shape[0] // 2

    def mirrored(self):
        return PSFKernel(self.taps[:, ::-1])


def kernel_centroid(kernel):
    """First horizontal moment of the taps, in pixels relative to the center."""
    r = kernel.radius
    xs = np.arange(-r, r + 1, dtype=np.float64)
    return float(np.sum(kernel.taps.sum(axis=0) * xs))


def make_dp_psf_pair(alpha):
    """Parametric half-disc PSFs for blur scale `alpha`.

    k_C is a disc of radius ceil(alpha) with a one-pixel linear edge; k_L keeps
    its left half-plane (the center column at half weight), k_R mirrors k_L.
    Each kernel sums to one.
    """
    if alpha < 0:
        raise ValueError(f'blur scale must be non-negative, got {alpha}')
    r = math.ceil(alpha)
    if r == 0:
        delta = PSFKernel.delta()
        return delta, delta, delta
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    disc = np.clip(alpha + 0.5 - np.hypot(x, y), 0.0, 1.0)
    left = disc * np.clip(0.5 - x, 0.0, 1.0)
    k_left = PSFKernel.normalized(left)
    k_right = k_left.mirrored()
    k_combined = PSFKernel.normalized((k_left.taps + k_right.taps) / 2.0)
    return k_left, k_right, k_combined


def expected_disparity(alpha):
    """Moment oracle: centroid separation between the right and left PSFs (full-res pixels)."""
    k_left, k_right, _ = make_dp_psf_pair(alpha)
    return kernel_centroid(k_right) - kernel_centroid(k_left)


@dataclass(frozen=True, eq=False)
class PSFGrid:
    """Per-cell kernels of one view, array shape (rows, cols, 2r+1, 2r+1)."""
    kernels: np.ndarray
    view: str

    def __post_init__(self):
        kernels = np.array(self.kernels, dtype=np.float64, copy=True)
        if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3] or kernels.shape[2] % 2 != 1:
            raise ShapeMismatchError(f'bad PSF grid shape {kernels.shape}')
        if kernels.shape[0] < 1 or kernels.shape[1] < 1:
            raise ShapeMismatchError('PSF grid needs at least one cell')
        if self.view not in VIEWS:
            raise ValueError(f'unknown view tag {self.view!r}')
        if np.any(kernels < 0):
            raise ValueError('PSF grid taps must be non-negative')
        sums = kernels.sum(axis=(2, 3))
        if np.max(np.abs(sums - 1.0)) > 1e-6:
            raise ValueError('every PSF grid cell must sum to 1')
        kernels.setflags(write=False)
        object.__setattr__(self, 'kernels', kernels)

    @classmethod
    def uniform(cls, kernel, grid_shape, view):
        rows, cols = grid_shape
        kernels = np.broadcast_to(kernel.taps, (rows, cols) + kernel.taps.shape)
        return cls(kernels, view)

    @property
    def rows(self):
        return self.kernels.shape[0]

    @property
    def cols(self):
        return self.kernels.shape[1]

    @property
    def grid_shape(self):
        return self.rows, self.cols

    @property
    def radius(self):
        return self.kernels.shape[2] // 2

    def kernel(self, row, col):
        return PSFKernel(self.kernels[row, col])


def parametric_psf_grid(alpha, grid_shape=DEFAULT_GRID_SHAPE):
    k_left, k_right, k_combined = make_dp_psf_pair(alpha)
    return {
        'L': PSFGrid.uniform(k_left, grid_shape, 'L'),
        'R': PSFGrid.uniform(k_right, grid_shape, 'R'),
        'C': PSFGrid.uniform(k_combined, grid_shape, 'C'),
    }


def combine_grids(grid_left, grid_right):
    """K_C = (K_L + K_R) / 2, cell by cell."""
    if grid_left.kernels.shape != grid_right.kernels.shape:
        raise ShapeMismatchError('left and right PSF grids differ in shape')
    kernels = (grid_left.kernels + grid_right.kernels) / 2.0
    kernels = kernels / kernels.sum(axis=(2, 3), keepdims=True)
    return PSFGrid(kernels, 'C')


def scale_psf_grid(grid, alpha):
    """Resample every kernel spatially by `alpha` (bilinear) and renormalize."""
    if alpha < 0:
        raise ValueError(f'blur scale must be non-negative, got {alpha}')
    rows, cols = grid.grid_shape
    if alpha == 0:
        return PSFGrid(np.ones((rows, cols, 1, 1)), grid.view)
    r = grid.radius
    new_r = max(0, math.ceil(r * alpha - 1e-9))
    offsets = np.arange(-new_r, new_r + 1, dtype=np.float64) / alpha + r
    yy, xx = np.meshgrid(offsets, offsets, indexing='ij')
    scaled = np.empty((rows, cols, 2 * new_r + 1, 2 * new_r + 1))
    for i in range(rows):
        for j in range(cols):
            taps = ndimage.map_coordinates(grid.kernels[i, j], [yy, xx], order=1, mode='constant', cval=0.0)
            scaled[i, j] = PSFKernel.normalized(taps).taps if taps.sum() > 0 else _delta_taps(new_r)
    return PSFGrid(scaled, grid.view)


def _delta_taps(radius):
    taps = np.zeros((2 * radius + 1, 2 * radius + 1))
    taps[radius, radius] = 1.0
    return taps


def dp_psf_grids(alpha, grid_shape=DEFAULT_GRID_SHAPE, calibrated=None):
    """K_v^alpha for v in L, R, C.

    `calibrated` maps 'L' and 'R' to unit-scale grids (e.g. loaded DPPG files);
    K_C is formed from them before scaling. Without it the parametric model
    is evaluated directly at `alpha`.
    """
    if calibrated is None:
        return parametric_psf_grid(alpha, grid_shape)
    base = {'L': calibrated['L'], 'R': calibrated['R']}
    base['C'] = combine_grids(base['L'], base['R'])
    return {view: scale_psf_grid(grid, alpha) for view, grid in base.items()}


def save_psf_grid(grid, path):
    header = _GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, grid.rows, grid.cols, grid.radius, _VIEW_TAGS[grid.view])
    with open(path, 'wb') as handle:
        handle.write(header)
        handle.write(grid.kernels.astype('<f4').tobytes())


def load_psf_grid(path):
    """Read a DPPG file; taps are renormalized per cell after the f32 round trip."""
    blob = Path(path).read_bytes()
    if len(blob) < _GRID_HEADER.size:
        raise ImageFormatError(f'{path}: truncated PSF grid header')
    magic, version, rows, cols, radius, tag = _GRID_HEADER.unpack_from(blob)
    if magic != GRID_MAGIC:
        raise ImageFormatError(f'{path}: not a DPPG file')
    if version != GRID_VERSION:
        raise ImageFormatError(f'{path}: unsupported DPPG version {version}')
    views = {value: key for key, value in _VIEW_TAGS.items()}
    if tag not in views:
        raise ImageFormatError(f'{path}: unknown view tag {tag}')
    size = 2 * radius + 1
    count = rows * cols * size * size
    payload = blob[_GRID_HEADER.size:]
    if len(payload) != count * 4:
        raise ImageFormatError(f'{path}: expected {count} taps, found {len(payload) // 4}')
    kernels = np.frombuffer(payload, dtype='<f4').astype(np.float64).reshape(rows, cols, size, size)
    kernels = np.clip(kernels, 0.0, None)
    sums = kernels.sum(axis=(2, 3), keepdims=True)
    if np.any(sums <= 0):
        raise ImageFormatError(f'{path}: PSF cell with no energy')
    return PSFGrid(kernels / sums, views[tag])


# ---------- spatially varying convolution ----------

def cell_edges(length, count):
    edges = np.round(np.linspace(0, length, count + 1)).astype(int)
    return edges


def _ramp(positions, start, stop, length, band):
    """Feathering weight: linear over 2*band pixels centred on interior cell edges."""
    weight = np.ones(positions.shape, dtype=np.float64)
    if start > 0:
        weight = np.minimum(weight, np.clip((positions - (start - band) + 0.5) / (2 * band), 0.0, 1.0))
    if stop < length:
        weight = np.minimum(weight, np.clip(((stop + band) - positions - 0.5) / (2 * band), 0.0, 1.0))
    return weight


def patchwise_conv(image, grid, threads=None):
    """Convolve each grid cell with its kernel and feather the seams.

    Borders use symmetric reflection; neighbouring cells overlap by one kernel
    radius on each side of their shared edge and are blended linearly. Cells
    are convolved in parallel but accumulated in a fixed order.
    """
    data = image.data.astype(np.float64)
    channels, height, width = data.shape
    if grid.radius == 0:
        return Image(image.data)

    y_edges = cell_edges(height, grid.rows)
    x_edges = cell_edges(width, grid.cols)
    smallest = min(np.diff(y_edges).min(), np.diff(x_edges).min())
    if grid.radius > smallest:
        raise ShapeMismatchError(f'kernel radius {grid.radius} exceeds patch size {smallest}')

    r = band = grid.radius
    pad = band + r
    padded = np.pad(data, ((0, 0), (pad, pad), (pad, pad)), mode='symmetric')

    cells = []
    for i in range(grid.rows):
        for j in range(grid.cols):
            y0, y1 = y_edges[i], y_edges[i + 1]
            x0, x1 = x_edges[j], x_edges[j + 1]
            ey0, ey1 = max(y0 - band, 0), min(y1 + band, height)
            ex0, ex1 = max(x0 - band, 0), min(x1 + band, width)
            cells.append((i, j, (y0, y1, x0, x1), (ey0, ey1, ex0, ex1)))

    def convolve_cell(cell):
        i, j, _, (ey0, ey1, ex0, ex1) = cell
        taps = grid.kernels[i, j]
        crop = padded[:, ey0 - r + pad:ey1 + r + pad, ex0 - r + pad:ex1 + r + pad]
        return np.stack([signal.fftconvolve(plane, taps, mode='valid') for plane in crop])

    blurred = ordered_map(convolve_cell, cells, threads)

    accumulated = np.zeros_like(data)
    weights = np.zeros((height, width), dtype=np.float64)
    for (_, _, (y0, y1, x0, x1), (ey0, ey1, ex0, ex1)), block in zip(cells, blurred):
        wy = _ramp(np.arange(ey0, ey1), y0, y1, height, band)
        wx = _ramp(np.arange(ex0, ex1), x0, x1, width, band)
        w = np.outer(wy, wx)
        accumulated[:, ey0:ey1, ex0:ex1] += block * w
        weights[ey0:ey1, ex0:ex1] += w

    out = np.clip(accumulated / weights, 0.0, 1.0)
    # FFT round-off leaves ~1e-17 residue where the exact result is zero.
    out[out < _ZERO_SNAP] = 0.0
    return Image(out)


def match_exposure(view, reference):
    """Offset each channel of `view` so its mean equals the one of `reference`."""
    data = view.data.astype(np.float64)
    offset = reference.data.mean(axis=(1, 2), dtype=np.float64) - data.mean(axis=(1, 2))
    return Image(np.clip(data + offset[:, np.newaxis, np.newaxis], 0.0, 1.0))

def form_dp_views(sharp, alpha, grid_shape=DEFAULT_GRID_SHAPE, calibrated=None, threads=None):
    """Render left/right/combined views of an all-in-focus image at blur scale `alpha`.

    Each view is exposure-matched to the sharp image: reflected borders shift
    the mean of a half-aperture view, and one offset per channel removes it.
    The offset is linear in the view, so green(C) stays the mean of L and R.
    """
    grids = dp_psf_grids(alpha, grid_shape, calibrated)
    green = green_channel(sharp)
    left = match_exposure(patchwise_conv(green, grids['L'], threads), green)
    right = match_exposure(patchwise_conv(green, grids['R'], threads), green)
    combined = match_exposure(patchwise_conv(sharp, grids['C'], threads), sharp)
    logger.debug('formed DP views at alpha=%.3f (radius %d)', alpha, grids['C'].radius)
    return DPFrame(left, right, combined)
