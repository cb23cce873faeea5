"""
Synthetic fence dataset generation.

A fence asset (all-in-focus texture plus binary mask) is fitted to a clean
in-focus dual-pixel frame, augmented, placed at a random depth and rendered
into every view with that view's PSF grid: the sharp composite and the mask
are blurred with the same kernels and blended over the unblurred background.
"""
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from django.conf import settings

from .dpform import DEFAULT_GRID_SHAPE, ThinLens, blur_scale, dp_psf_grids, expected_disparity, patchwise_conv
from .exceptions import AugmentationRejected, FenceError, ImageFormatError, ShapeMismatchError
from .imagecore import (
    DPFrame,
    FRAME_FILES,
    Image,
    MaskImage,
    green_channel,
    load_frame,
    load_pfm,
    load_png,
    replicate_rgb,
    save_frame,
    save_pfm,
    save_png,
)
from .parallel import ordered_map

logger = logging.getLogger(__name__)

# Independent random streams per sample, all derived from the recorded sample seed.
DEPTH_STREAM = 0
AUGMENT_STREAM = 1
TILE_STREAM = 2
SELECT_STREAM = 3

TEST_SHARE = (100, 904)
SPLIT_RULE = 'n_test = floor(n * 100 / 904 + 0.5); the last n_test sample indices form the test split'

MASK_SUFFIX = '_mask'


@dataclass(frozen=True)
class SynthConfig:
    """Depth range, lens, PSF grid and augmentation ranges of one dataset."""
    d_min: float = 0.10
    d_max: float = 0.50
    lens: ThinLens = field(default_factory=ThinLens)
    grid_shape: tuple = DEFAULT_GRID_SHAPE
    rotation_deg: float = 15.0
    scale_range: tuple = (0.8, 1.2)
    translate_px: float = 32.0
    flip_horizontal: bool = True
    flip_vertical: bool = False
    brightness: float = 0.1
    contrast: float = 0.2
    hue: float = 0.05
    base_seed: int = 0
    max_attempts: int = 10
    min_coverage: float = 0.001

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f'need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]')
        object.__setattr__(self, 'grid_shape', tuple(int(n) for n in self.grid_shape))
        object.__setattr__(self, 'scale_range', tuple(float(s) for s in self.scale_range))
        if len(self.grid_shape) != 2 or min(self.grid_shape) < 1:
            raise ValueError(f'bad grid shape {self.grid_shape}')
        low, high = self.scale_range
        if not 0 < low <= high:
            raise ValueError(f'bad scale range {self.scale_range}')
        for name in ('rotation_deg', 'translate_px', 'brightness', 'contrast', 'hue', 'min_coverage'):
            if getattr(self, name) < 0:
                raise ValueError(f'{name} must be non-negative')
        if self.max_attempts < 1:
            raise ValueError('max_attempts must be at least 1')

    @classmethod
    def without_augmentation(cls, **overrides):
        neutral = dict(rotation_deg=0.0, scale_range=(1.0, 1.0), translate_px=0.0, flip_horizontal=False,
                       flip_vertical=False, brightness=0.0, contrast=0.0, hue=0.0)
        neutral.update(overrides)
        return cls(**neutral)


def config_as_dict(config):
    """JSON-ready echo of a SynthConfig; an infinite focus distance becomes null."""
    echo = asdict(config)
    echo['grid_shape'] = list(config.grid_shape)
    echo['scale_range'] = list(config.scale_range)
    if math.isinf(config.lens.d_focus):
        echo['lens']['d_focus'] = None
    return echo


def config_hash(config):
    payload = json.dumps(config_as_dict(config), sort_keys=True).encode('utf-8')
    return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True, eq=False)
class FenceAsset:
    texture: Image
    mask: MaskImage
    name: str = 'fence'

    def __post_init__(self):
        if self.texture.channels != 3:
            raise ShapeMismatchError('fence texture must be RGB')
        if self.texture.shape[1:] != self.mask.data.shape:
            raise ShapeMismatchError(
                f'texture {self.texture.shape[1:]} and mask {self.mask.data.shape} dimensions differ'
            )
        if not self.mask.is_binary:
            raise ValueError('fence mask must be binary')

    @property
    def fence(self):
        return green_channel(self.texture)


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    index: int
    seed: int
    depth: float
    alpha: float
    expected_disparity: float
    asset: str
    clean: str
    attempts: int
    coverage: float
    split: str = 'train'
    files: dict = field(default_factory=dict)
    patches: list = field(default_factory=list)

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SampleData:
    """In-memory sample; `files` in the record are filled once it is written."""
    occluded: DPFrame
    clean: DPFrame
    soft_mask: MaskImage
    record: SampleRecord

    @property
    def binary_mask(self):
        return self.soft_mask.binarize(0.5)


def sample_seed(config, index):
    return int(np.random.SeedSequence([config.base_seed, index]).generate_state(1)[0])


def stream_seed(seed, stream, *extra):
    """Seed of one random stream of the sample whose manifest `seed` is given."""
    return np.random.SeedSequence([seed, stream, *extra])


def sample_rng(config, index, stream, *extra):
    return np.random.default_rng(stream_seed(sample_seed(config, index), stream, *extra))


def sample_depth(config, sample_index):
    """d ~ U(d_min, d_max), a pure function of (base_seed, sample_index)."""
    rng = sample_rng(config, sample_index, DEPTH_STREAM)
    return float(rng.uniform(config.d_min, config.d_max))


# ---------- augmentation ----------

@dataclass(frozen=True)
class GeometricParams:
    angle_deg: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    flip_horizontal: bool = False
    flip_vertical: bool = False

    @property
    def is_identity(self):
        return (self.angle_deg == 0.0 and self.scale == 1.0 and self.tx == 0.0 and self.ty == 0.0
                and not self.flip_horizontal and not self.flip_vertical)

    def matrix(self, height, width):
        """2x3 forward map: flip and scale-rotate about the image centre, then translate."""
        theta = np.deg2rad(self.angle_deg)
        rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        flips = np.diag([-1.0 if self.flip_horizontal else 1.0, -1.0 if self.flip_vertical else 1.0])
        linear = self.scale * rotation @ flips
        centre = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
        offset = centre + np.array([self.tx, self.ty]) - linear @ centre
        return np.hstack([linear, offset[:, np.newaxis]])


@dataclass(frozen=True)
class ColorParams:
    brightness: float = 0.0
    contrast: float = 0.0
    hue: float = 0.0

    @property
    def is_identity(self):
        return self.brightness == 0.0 and self.contrast == 0.0 and self.hue == 0.0


def draw_augmentation(config, rng):
    """Geometric parameters are drawn first so color ranges never change them."""
    low, high = config.scale_range
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)
    geometry = GeometricParams(
        angle_deg=float(rng.uniform(-config.rotation_deg, config.rotation_deg)),
        scale=float(rng.uniform(low, high)),
        tx=float(rng.uniform(-config.translate_px, config.translate_px)),
        ty=float(rng.uniform(-config.translate_px, config.translate_px)),
        flip_horizontal=flip_h and config.flip_horizontal,
        flip_vertical=flip_v and config.flip_vertical,
    )
    color = ColorParams(
        brightness=float(rng.uniform(-config.brightness, config.brightness)),
        contrast=float(rng.uniform(-config.contrast, config.contrast)),
        hue=float(rng.uniform(-config.hue, config.hue)),
    )
    return geometry, color


def warp_texture(texture, params):
    if params.is_identity:
        return texture
    height, width = texture.height, texture.width
    pixels = np.ascontiguousarray(texture.data.transpose(1, 2, 0))
    warped = cv2.warpAffine(pixels, params.matrix(height, width), (width, height),
                            flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)
    return Image.from_array(warped.transpose(2, 0, 1), clip=True)


def warp_mask(mask, params):
    if params.is_identity:
        return mask
    height, width = mask.height, mask.width
    warped = cv2.warpAffine(np.ascontiguousarray(mask.data), params.matrix(height, width), (width, height),
                            flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return MaskImage.from_bool(warped >= 0.5)


def jitter_color(texture, params):
    if params.is_identity:
        return texture
    rgb = texture.data.astype(np.float64) + params.brightness
    mean = rgb.mean()
    rgb = np.clip((rgb - mean) * (1.0 + params.contrast) + mean, 0.0, 1.0)
    if params.hue:
        hsv = cv2.cvtColor(np.ascontiguousarray(rgb.transpose(1, 2, 0), dtype=np.float32), cv2.COLOR_RGB2HSV)
        # float HSV hue lives in [0, 360)
        hsv[:, :, 0] = np.mod(hsv[:, :, 0] + 360.0 * params.hue, 360.0)
        rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB).transpose(2, 0, 1)
    return Image.from_array(rgb, clip=True)


def apply_geometry(asset, params):
    return FenceAsset(warp_texture(asset.texture, params), warp_mask(asset.mask, params), asset.name)


def augment_fence(asset, config, seed):
    """Identical geometric warp for texture and mask; color jitter on the texture only."""
    rng = np.random.default_rng(seed)
    geometry, color = draw_augmentation(config, rng)
    warped = apply_geometry(asset, geometry)
    augmented = FenceAsset(jitter_color(warped.texture, color), warped.mask, asset.name)
    if augmented.mask.coverage < config.min_coverage:
        raise AugmentationRejected(augmented.mask.coverage)
    return augmented


def _fit_axis(asset_length, frame_length, rng):
    if asset_length >= frame_length:
        start = int(rng.integers(0, asset_length - frame_length + 1))
        return start + np.arange(frame_length)
    phase = int(rng.integers(0, asset_length))
    return (phase + np.arange(frame_length)) % asset_length


def fit_asset_to_frame(asset, height, width, rng):
    """Crop larger assets at a random window; tile smaller ones with a random phase."""
    rows = _fit_axis(asset.mask.height, height, rng)
    cols = _fit_axis(asset.mask.width, width, rng)
    index = np.ix_(rows, cols)
    texture = Image(asset.texture.data[(slice(None),) + index])
    return FenceAsset(texture, MaskImage(asset.mask.data[index]), asset.name)


def prepare_fence(asset, height, width, config, sample_index):
    """Fit and augment, resampling up to `max_attempts` times. Returns (asset, attempts)."""
    last = None
    for attempt in range(config.max_attempts):
        fitted = fit_asset_to_frame(asset, height, width, sample_rng(config, sample_index, TILE_STREAM, attempt))
        seed = stream_seed(sample_seed(config, sample_index), AUGMENT_STREAM, attempt)
        try:
            return augment_fence(fitted, config, seed), attempt + 1
        except AugmentationRejected as exc:
            logger.debug('sample %d attempt %d rejected: %s', sample_index, attempt, exc)
            last = exc
    raise last


# ---------- compositing ----------

def _blend(background, foreground, weight):
    return background * (1.0 - weight) + foreground * weight


def composite_dp(clean, texture, mask, grids, threads=None):
    """Render a fence into a clean frame with per-view PSF grids.

    Left/right views use the green channel of the fence texture. Each view
    composites the sharp fence, blurs composite and mask with K_v, and blends
    the blurred composite over the sharp background with the blurred mask.
    Returns (occluded frame, {view: blurred mask}).
    """
    if clean.combined.shape[1:] != texture.shape[1:] or texture.shape[1:] != mask.data.shape:
        raise ShapeMismatchError('clean frame, fence texture and mask must share dimensions')
    hard = mask.data.astype(np.float64)
    mask_image = mask.as_image()
    fence = green_channel(texture)

    views = {}
    blurred_masks = {}
    for view, background, foreground in (
        ('L', clean.left, fence),
        ('R', clean.right, fence),
        ('C', clean.combined, texture),
    ):
        base = background.data.astype(np.float64)
        sharp = _blend(base, foreground.data.astype(np.float64), hard)
        blurred = patchwise_conv(Image(np.clip(sharp, 0.0, 1.0)), grids[view], threads).data.astype(np.float64)
        weight = patchwise_conv(mask_image, grids[view], threads).data[0].astype(np.float64)
        views[view] = Image(np.clip(_blend(base, blurred, weight), 0.0, 1.0))
        blurred_masks[view] = MaskImage(weight)

    occluded = DPFrame(views['L'], views['R'], views['C'], clean.disparity_axis)
    return occluded, blurred_masks


def synthesize_sample(clean, asset, config, sample_index, clean_name='clean', threads=None):
    """One fenced sample: (occluded frame, soft mask M_C,blur, record)."""
    depth = sample_depth(config, sample_index)
    alpha = blur_scale(config.lens, depth)
    fitted, attempts = prepare_fence(asset, clean.height, clean.width, config, sample_index)
    grids = dp_psf_grids(alpha, config.grid_shape)
    occluded, blurred_masks = composite_dp(clean, fitted.texture, fitted.mask, grids, threads)
    soft_mask = blurred_masks['C']
    record = SampleRecord(
        sample_id=f'{sample_index:06d}',
        index=sample_index,
        seed=sample_seed(config, sample_index),
        depth=depth,
        alpha=alpha,
        expected_disparity=expected_disparity(alpha),
        asset=asset.name,
        clean=clean_name,
        attempts=attempts,
        coverage=soft_mask.binarize(0.5).coverage,
    )
    logger.debug('sample %s: depth %.3f m, alpha %.3f, coverage %.3f', record.sample_id, depth, alpha,
                 record.coverage)
    return occluded, soft_mask, record


# ---------- patches ----------

def patch_count(height, width, patch, stride):
    return ((height - patch) // stride + 1) * ((width - patch) // stride + 1)


def patch_origins(height, width, patch, stride):
    if stride <= 0:
        raise ValueError(f'stride must be positive, got {stride}')
    if patch <= 0 or patch > height or patch > width:
        raise ShapeMismatchError(f'patch {patch} does not fit a {height}x{width} frame')
    return [(y, x) for y in range(0, height - patch + 1, stride) for x in range(0, width - patch + 1, stride)]


@dataclass(frozen=True, eq=False)
class PatchData:
    sample_id: str
    y: int
    x: int
    size: int
    occluded: DPFrame
    clean: DPFrame
    soft_mask: MaskImage

    @property
    def patch_id(self):
        return f'{self.sample_id}_{self.y:05d}_{self.x:05d}'


def _crop_frame(frame, y, x, size):
    def crop(image):
        return Image(image.data[:, y:y + size, x:x + size])
    return DPFrame(crop(frame.left), crop(frame.right), crop(frame.combined), frame.disparity_axis)


def extract_patches(sample, patch, stride):
    """Crop every view and mask with identical square windows."""
    origins = patch_origins(sample.occluded.height, sample.occluded.width, patch, stride)
    return [
        PatchData(
            sample.record.sample_id, y, x, patch,
            _crop_frame(sample.occluded, y, x, patch),
            _crop_frame(sample.clean, y, x, patch),
            MaskImage(sample.soft_mask.data[y:y + patch, x:x + patch]),
        )
        for y, x in origins
    ]


def calibrate_stride(height, width, patch=512, frames=804, target=13700):
    """Stride (<= patch) whose patch total over `frames` frames is closest to `target`.

    Ties go to the larger stride. Returns (stride, patches per frame).
    """
    best = None
    for stride in range(1, patch + 1):
        count = patch_count(height, width, patch, stride)
        key = (abs(frames * count - target), -stride)
        if best is None or key < best[0]:
            best = (key, stride, count)
    return best[1], best[2]


# ---------- inputs ----------

def load_clean_frames(directory):
    """Frame directories (left/right/combined PNGs) or plain RGB images treated as in focus."""
    directory = Path(directory)
    frames = []
    for entry in sorted(directory.iterdir()):
        if entry.is_dir() and all((entry / name).exists() for name in FRAME_FILES.values()):
            frames.append((entry.name, load_frame(entry)))
        elif entry.is_file() and entry.suffix.lower() == '.png':
            image = load_png(entry)
            if image.channels == 1:
                image = replicate_rgb(image)
            frames.append((entry.stem, DPFrame.in_focus(image)))
    if not frames:
        raise FenceError(f'no clean frames found in {directory}')
    return frames


def load_assets(directory):
    """`<name>.png` textures paired with `<name>_mask.png` masks."""
    directory = Path(directory)
    assets = []
    for path in sorted(directory.glob('*.png')):
        if path.stem.endswith(MASK_SUFFIX):
            continue
        mask_path = path.with_name(f'{path.stem}{MASK_SUFFIX}.png')
        if not mask_path.exists():
            raise ImageFormatError(f'fence asset {path.name} has no {mask_path.name}')
        texture = load_png(path)
        if texture.channels == 1:
            texture = replicate_rgb(texture)
        mask = load_png(mask_path)
        assets.append(FenceAsset(texture, MaskImage.from_bool(mask.data[0] >= 0.5), path.stem))
    if not assets:
        raise FenceError(f'no fence assets found in {directory}')
    return assets


# ---------- dataset ----------

def held_out_count(n_samples):
    share, total = TEST_SHARE
    return int(math.floor(n_samples * share / total + 0.5))


def _relative(path, root):
    return Path(path).relative_to(root).as_posix()


def write_sample(sample, root):
    sample_dir = Path(root) / 'samples' / sample.record.sample_id
    save_frame(sample.occluded, sample_dir / 'occluded')
    save_frame(sample.clean, sample_dir / 'clean')
    save_pfm(sample.soft_mask, sample_dir / 'soft_mask.pfm')
    save_png(sample.binary_mask, sample_dir / 'mask.png', bit_depth=8)
    files = {
        'occluded': _relative(sample_dir / 'occluded', root),
        'clean': _relative(sample_dir / 'clean', root),
        'soft_mask': _relative(sample_dir / 'soft_mask.pfm', root),
        'mask': _relative(sample_dir / 'mask.png', root),
    }
    return replace(sample.record, files=files)


def write_patches(sample, record, root, patch, stride):
    entries = []
    for piece in extract_patches(sample, patch, stride):
        patch_dir = Path(root) / 'patches' / piece.patch_id
        save_frame(piece.occluded, patch_dir / 'occluded')
        save_frame(piece.clean, patch_dir / 'clean')
        save_pfm(piece.soft_mask, patch_dir / 'soft_mask.pfm')
        save_png(piece.soft_mask.binarize(0.5), patch_dir / 'mask.png', bit_depth=8)
        entries.append({'id': piece.patch_id, 'y': piece.y, 'x': piece.x, 'dir': _relative(patch_dir, root)})
    return replace(record, patches=entries)


def generate_dataset(clean_frames, assets, config, n_samples, out_dir, patch=None, stride=None, threads=None):
    """Render `n_samples` samples into `out_dir` and write `manifest.json`.

    `clean_frames` is a list of (name, DPFrame). Every sample is a pure
    function of (inputs, config, index), so any thread count produces the
    same bytes.
    """
    if not clean_frames:
        raise FenceError('at least one clean frame is required')
    if not assets:
        raise FenceError('at least one fence asset is required')
    if n_samples < 1:
        raise ValueError('n_samples must be positive')
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    n_test = held_out_count(n_samples)

    def build(index):
        select = sample_rng(config, index, SELECT_STREAM)
        clean_name, clean = clean_frames[int(select.integers(len(clean_frames)))]
        asset = assets[int(select.integers(len(assets)))]
        occluded, soft_mask, record = synthesize_sample(clean, asset, config, index, clean_name, threads=1)
        split = 'test' if index >= n_samples - n_test else 'train'
        sample = SampleData(occluded, clean, soft_mask, replace(record, split=split))
        record = write_sample(sample, root)
        if patch is not None:
            record = write_patches(sample, record, root, patch, stride if stride is not None else patch)
        logger.info('sample %s (%s): alpha %.3f, mask coverage %.3f', record.sample_id, split, record.alpha,
                    record.coverage)
        return record

    records = ordered_map(build, range(n_samples), threads)
    manifest = {
        'schema_version': settings.FENCE_SCHEMA_VERSION,
        'config': config_as_dict(config),
        'config_hash': config_hash(config),
        'n_samples': n_samples,
        'split_rule': SPLIT_RULE,
        'splits': {
            'train': [r.sample_id for r in records if r.split == 'train'],
            'test': [r.sample_id for r in records if r.split == 'test'],
        },
        'clean_frames': [name for name, _ in clean_frames],
        'assets': [asset.name for asset in assets],
        'patch': None if patch is None else {'size': patch, 'stride': stride if stride is not None else patch},
        'records': [record.as_dict() for record in records],
    }
    (root / 'manifest.json').write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_sample(manifest_path, record):
    """Re-read one written sample from the paths in its manifest record."""
    root = Path(manifest_path).parent
    files = record['files']
    return SampleData(
        occluded=load_frame(root / files['occluded']),
        clean=load_frame(root / files['clean']),
        soft_mask=MaskImage(load_pfm(root / files['soft_mask']).data[0]),
        record=SampleRecord(**record),
    )
