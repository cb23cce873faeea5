"""
Fence segmentation and removal.

The classical segmenter scores every half-resolution pixel by two cues: a
geometric one (fence pixels sit in front of the in-focus background, so
they carry positive dual-pixel disparity) and a structural one (fences are
periodic). The fused score is thresholded, cleaned with morphology and
upsampled. Removal dilates the mask and fills it by harmonic interpolation.
"""
import logging
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import factorized

from .costvol import (
    CostVolumeParams,
    aggregate_cost,
    build_cost_volume,
    disp_pyramid,
    disparity_argmax,
    extract_features,
)
from .exceptions import FenceError
from .imagecore import DPFrame, Image, MaskImage, green_channel
from .structfreq import FUSION_MODES, freqdp_forward, periodicity_score

logger = logging.getLogger(__name__)

CUES = ('dual', 'geometry', 'structure')
MODES = ('classical', 'learned-toy')
CUE_FUSIONS = ('max', 'weighted')
INPAINT_METHODS = ('direct', 'iterative')

JACOBI_TOLERANCE = 1e-4
JACOBI_MAX_ITERATIONS = 2000

# The untrained network pools three times.
LEARNED_MULTIPLE = 8
# Least seed weight and fence/background colour distance for an edge decision.
SEED_WEIGHT_FLOOR = 1e-3
MIN_EDGE_CONTRAST = 0.05


@dataclass(frozen=True)
class SegmentConfig:
    tau_d: float = 1.0
    tau_c: float = 0.2
    w_geo: float = 0.7
    w_struct: float = 0.3
    morph_radius: int = 2
    dilate_radius: int = 2
    tau_m: float = 0.5
    periodicity_window: int = 32
    cues: str = 'dual'
    cue_fusion: str = 'max'
    edge_band: int = 12
    edge_fraction: float = 0.25
    mode: str = 'classical'
    fusion: str = 'sam'
    seed: int = 0
    inpaint_method: str = 'direct'
    cost_volume: CostVolumeParams = field(default_factory=CostVolumeParams)

    def __post_init__(self):
        if not self.tau_d > 0:
            raise ValueError('tau_d must be positive')
        if not 0.0 <= self.tau_c <= 1.0:
            raise ValueError('tau_c must lie in [0, 1]')
        if not 0.0 <= self.tau_m <= 1.0:
            raise ValueError('tau_m must lie in [0, 1]')
        if self.w_geo < 0 or self.w_struct < 0 or abs(self.w_geo + self.w_struct - 1.0) > 1e-9:
            raise ValueError('cue weights must be non-negative and sum to 1')
        if not 0.0 < self.edge_fraction < 1.0:
            raise ValueError('edge_fraction must lie in (0, 1)')
        if self.morph_radius < 0 or self.dilate_radius < 0 or self.edge_band < 0:
            raise ValueError('radii must be non-negative')
        if self.cues not in CUES:
            raise ValueError(f'unknown cue selection {self.cues!r}')
        if self.cue_fusion not in CUE_FUSIONS:
            raise ValueError(f'unknown cue fusion {self.cue_fusion!r}')
        if self.mode not in MODES:
            raise ValueError(f'unknown segmentation mode {self.mode!r}')
        if self.fusion not in FUSION_MODES:
            raise ValueError(f'unknown fusion {self.fusion!r}')
        if self.inpaint_method not in INPAINT_METHODS:
            raise ValueError(f'unknown inpainting method {self.inpaint_method!r}')


def disc(radius):
    y, x = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return (x * x + y * y <= radius * radius).astype(np.uint8)


def _pool2(values):
    height, width = values.shape
    return values.reshape(height // 2, 2, width // 2, 2).mean(axis=(1, 3))


def _largest_window(window, height, width):
    limit = min(height, width)
    while window > limit and window > 4:
        window //= 2
    return window


def pad_frame(frame, multiple):
    """Reflect-pad every view at the bottom and right up to a multiple of `multiple`."""
    pad_y = -frame.height % multiple
    pad_x = -frame.width % multiple
    if not (pad_y or pad_x):
        return frame

    def pad(image):
        return Image(np.pad(image.data, ((0, 0), (0, pad_y), (0, pad_x)), mode='symmetric'))
    return DPFrame(pad(frame.left), pad(frame.right), pad(frame.combined), frame.disparity_axis)


def _upsample(flags):
    return np.repeat(np.repeat(flags, 2, axis=0), 2, axis=1)


def cost_volume_for(frame, params, threads=None):
    features_left = extract_features(frame.left)
    features_right = extract_features(frame.right)
    volume = build_cost_volume(features_left, features_right, params.d_max, params.step, threads)
    return aggregate_cost(volume, params.window)


def geometric_cue(disparity, confidence, cfg):
    """Disparity normalised by tau_d, zeroed where the match is not confident."""
    return np.clip(disparity.values / cfg.tau_d, 0.0, 1.0) * (confidence.values >= cfg.tau_c)


def structural_cue(combined, cfg):
    pooled = _pool2(green_channel(combined).data[0].astype(np.float64))
    window = _largest_window(cfg.periodicity_window, *pooled.shape)
    if window != cfg.periodicity_window:
        logger.debug('periodicity window reduced to %d for a %dx%d frame', window, *pooled.shape)
    return periodicity_score(pooled, window)


def cue_scores(frame, cfg, threads=None):
    """Half-resolution (geometry, structure) score maps."""
    volume = cost_volume_for(frame, cfg.cost_volume, threads)
    disparity, confidence = disparity_argmax(volume)
    return geometric_cue(disparity, confidence, cfg), structural_cue(frame.combined, cfg)


def fuse_cues(geometry, structure, cfg):
    """Half-resolution score for the selected cues.

    With `cue_fusion="max"` the structural cue can only raise the geometric
    score, so a dual-cue mask always contains the geometry-only one.
    """
    if cfg.cues == 'geometry':
        return geometry
    if cfg.cues == 'structure':
        return structure
    weighted = cfg.w_geo * geometry + cfg.w_struct * structure
    if cfg.cue_fusion == 'weighted':
        return weighted
    return np.maximum(geometry, weighted)


def clean_mask(flags, radius):
    """Closing then opening with a disc; pixels outside the image never erode the mask."""
    if radius == 0:
        return flags
    kernel = disc(radius)
    pixels = flags.astype(np.uint8)
    pixels = cv2.morphologyEx(pixels, cv2.MORPH_CLOSE, kernel)
    pixels = cv2.morphologyEx(pixels, cv2.MORPH_OPEN, kernel)
    return pixels.astype(bool)


def fence_fraction(combined, fence_seed, background_seed, sigma):
    """Share of the local fence colour in every pixel of the combined view.

    Fence and background colours are Gaussian-weighted means over the seed
    pixels. Pixels where either colour is undefined, or the two are too
    close to tell apart, get +inf.
    """
    rgb = ndimage.gaussian_filter(combined.data.astype(np.float64), sigma=(0, 1, 1))

    def local_mean(seed):
        weight = ndimage.gaussian_filter(seed.astype(np.float64), sigma)
        total = np.stack([ndimage.gaussian_filter(channel * seed, sigma) for channel in rgb])
        return total / np.maximum(weight, SEED_WEIGHT_FLOOR), weight

    fence_colour, fence_weight = local_mean(fence_seed)
    background_colour, background_weight = local_mean(background_seed)
    contrast = fence_colour - background_colour
    energy = np.sum(contrast * contrast, axis=0)
    known = ((fence_weight > SEED_WEIGHT_FLOOR) & (background_weight > SEED_WEIGHT_FLOOR)
             & (energy > MIN_EDGE_CONTRAST ** 2))
    fraction = np.full(energy.shape, np.inf)
    fraction[known] = np.sum((rgb - background_colour) * contrast, axis=0)[known] / energy[known]
    return fraction


def refine_edges(flags, seeds, combined, cfg):
    """Trim mask pixels near the fence outline that look like background.

    `seeds` is the geometry-only mask. Its interior, eroded by `edge_band`,
    gives the fence colour and everything clear of it gives the background
    colour. A pixel rendered with blurred fence coverage w shows a w**2 share
    of the fence colour, so coverage 0.5 sits at `edge_fraction` = 0.25.
    Only pixels deep inside the seeds or at or above that share are kept.
    """
    if cfg.edge_band == 0 or not seeds.any():
        return flags
    seed_pixels = seeds.astype(np.uint8)
    core = cv2.erode(seed_pixels, disc(cfg.edge_band)).astype(bool)
    background = ~cv2.dilate(seed_pixels, disc(max(1, cfg.edge_band // 4))).astype(bool)
    if not core.any() or not background.any():
        logger.debug('edge refinement skipped: no fence core or no background left')
        return flags
    fraction = fence_fraction(combined, core, background, cfg.edge_band)
    refined = flags & (core | (fraction >= cfg.edge_fraction))
    logger.debug('edge refinement dropped %d pixels', int(flags.sum() - refined.sum()))
    return refined


def segment_fence(frame, cfg=None, threads=None):
    """Binary fence mask at full resolution.

    Frames whose sides do not divide the working scale are padded by
    reflection and the mask is cropped back.
    """
    cfg = cfg or SegmentConfig()
    if cfg.mode == 'learned-toy':
        padded = pad_frame(frame, LEARNED_MULTIPLE)
        flags = _segment_learned(padded, cfg, threads)
    else:
        flags = _segment_classical(pad_frame(frame, 2), cfg, threads)
    mask = MaskImage.from_bool(flags[:frame.height, :frame.width])
    logger.info('segmented fence (%s, %s cues): coverage %.4f', cfg.mode, cfg.cues, mask.coverage)
    return mask


def _segment_classical(frame, cfg, threads):
    geometry, structure = cue_scores(frame, cfg, threads)
    flags = _upsample(clean_mask(fuse_cues(geometry, structure, cfg) >= cfg.tau_m, cfg.morph_radius))
    if cfg.cues == 'structure':
        return flags
    seeds = _upsample(clean_mask(geometry >= cfg.tau_m, cfg.morph_radius))
    return refine_edges(flags, seeds, frame.combined, cfg)


def _segment_learned(frame, cfg, threads):
    volume = cost_volume_for(frame, cfg.cost_volume, threads)
    soft = freqdp_forward(frame.combined, disp_pyramid(volume), seed=cfg.seed, fusion=cfg.fusion)
    logger.debug('untrained network with %s fusion', cfg.fusion)
    return clean_mask(soft.data >= cfg.tau_m, cfg.morph_radius)


def dilate_mask(mask, r):
    if r < 0:
        raise ValueError('dilation radius must be non-negative')
    if r == 0:
        return mask
    grown = cv2.dilate(mask.flags().astype(np.uint8), disc(r))
    return MaskImage.from_bool(grown.astype(bool))


# ---------- inpainting ----------

_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def _laplace_system(flags, data):
    """Sparse 4-neighbour Laplacian over the masked pixels; image borders are Neumann."""
    height, width = flags.shape
    ys, xs = np.nonzero(flags)
    count = ys.size
    index = np.full(flags.shape, -1, dtype=np.int64)
    index[ys, xs] = np.arange(count)

    degree = np.zeros(count)
    rhs = np.zeros((data.shape[0], count))
    rows, cols = [], []
    for dy, dx in _NEIGHBOURS:
        ny, nx = ys + dy, xs + dx
        inside = (ny >= 0) & (ny < height) & (nx >= 0) & (nx < width)
        degree += inside
        source = np.nonzero(inside)[0]
        ny, nx = ny[inside], nx[inside]
        neighbour = index[ny, nx]
        unknown = neighbour >= 0
        rows.append(source[unknown])
        cols.append(neighbour[unknown])
        known = ~unknown
        rhs[:, source[known]] += data[:, ny[known], nx[known]]

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    off_diagonal = sparse.coo_matrix((-np.ones(rows.size), (rows, cols)), shape=(count, count))
    system = (sparse.diags(degree) + off_diagonal).tocsc()
    return (ys, xs), system, rhs


def _fill_direct(flags, data):
    (ys, xs), system, rhs = _laplace_system(flags, data)
    solve = factorized(system)
    return (ys, xs), np.stack([solve(channel) for channel in rhs])


def _fill_iterative(flags, data):
    """Jacobi sweeps until the largest update drops below the tolerance."""
    filled = data.copy()
    known = ~flags
    filled[:, flags] = data[:, known].mean(axis=1)[:, np.newaxis]
    ones = np.pad(np.ones(flags.shape), 1)
    degree = ones[:-2, 1:-1] + ones[2:, 1:-1] + ones[1:-1, :-2] + ones[1:-1, 2:]
    for iteration in range(JACOBI_MAX_ITERATIONS):
        padded = np.pad(filled, ((0, 0), (1, 1), (1, 1)))
        average = (padded[:, :-2, 1:-1] + padded[:, 2:, 1:-1] + padded[:, 1:-1, :-2] + padded[:, 1:-1, 2:]) / degree
        update = np.abs(average[:, flags] - filled[:, flags]).max()
        filled[:, flags] = average[:, flags]
        if update < JACOBI_TOLERANCE:
            break
    logger.debug('jacobi fill stopped after %d iterations (last update %.2e)', iteration + 1, update)
    return np.nonzero(flags), filled[:, flags]


def inpaint(img, mask, method='direct'):
    """Harmonic fill of the masked pixels; every other pixel is returned bit-exactly."""
    if method not in INPAINT_METHODS:
        raise ValueError(f'unknown inpainting method {method!r}')
    if img.shape[1:] != mask.data.shape:
        raise ValueError(f'image {img.shape[1:]} and mask {mask.data.shape} dimensions differ')
    if not mask.is_binary:
        raise ValueError('inpainting needs a binary mask')
    flags = mask.flags()
    if not flags.any():
        return img
    if flags.all():
        raise FenceError('mask covers the entire image; nothing to interpolate from')

    data = img.data.astype(np.float64)
    fill = _fill_direct if method == 'direct' else _fill_iterative
    (ys, xs), values = fill(flags, data)
    out = img.data.copy()
    out[:, ys, xs] = np.clip(values, 0.0, 1.0)
    return Image(out)


def remove_fence(frame, cfg=None, threads=None):
    """Segment, dilate and inpaint the combined view. Returns (restored, mask)."""
    cfg = cfg or SegmentConfig()
    mask = dilate_mask(segment_fence(frame, cfg, threads), cfg.dilate_radius)
    if mask.flags().all():
        raise FenceError('segmentation flagged every pixel as fence')
    restored = inpaint(frame.combined, mask, cfg.inpaint_method)
    logger.info('removed fence: %d pixels filled', int(mask.flags().sum()))
    return restored, mask
