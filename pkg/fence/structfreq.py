"""
Structural branch building blocks, forward only.

The FFC unit splits channels into a local stream (3x3 spatial convolution)
and a global stream whose global->global path mixes channels per frequency
in the Fourier domain. SAM gates structural features with a sigmoid of the
disparity features. A hand-crafted periodicity score stands in for the
learned structural prior in the classical segmenter.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft
from scipy.signal import windows
from scipy.special import expit

from .exceptions import ShapeMismatchError
from .imagecore import MaskImage, read_pfm, write_pfm

logger = logging.getLogger(__name__)

FUSION_MODES = ('sam', 'concat', 'none')
PERIODICITY_HARMONICS = 3


@dataclass(frozen=True, eq=False)
class FeatureTensor:
    """Features of shape (C, H, W); the first `split` channels form the global stream."""
    data: np.ndarray
    split: int = 0

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3:
            raise ShapeMismatchError(f'feature tensor must be (C, H, W), got {data.shape}')
        if not 0 <= self.split <= data.shape[0]:
            raise ShapeMismatchError(f'split {self.split} outside [0, {data.shape[0]}]')
        if not np.all(np.isfinite(data)):
            raise ValueError('feature tensor contains non-finite values')
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def spatial(self):
        return self.data.shape[1:]

    @property
    def global_part(self):
        return self.data[:self.split]

    @property
    def local_part(self):
        return self.data[self.split:]


@dataclass(frozen=True, eq=False)
class SpectralWeights:
    """Per-frequency 2x2 blocks acting on stacked (real, imag) parts.

    `blocks` has shape (C_out, C_in, 2, 2, Fh, Fw) where (Fh, Fw) is either
    (1, 1), shared by every frequency, or the rfft2 grid (H, W // 2 + 1).
    `bias` has shape (C_out, 2) and is added to every frequency bin.
    """
    blocks: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        if blocks.ndim != 6 or blocks.shape[2:4] != (2, 2):
            raise ShapeMismatchError(f'spectral blocks must be (O, I, 2, 2, Fh, Fw), got {blocks.shape}')
        if bias.shape != (blocks.shape[0], 2):
            raise ShapeMismatchError(f'spectral bias must be ({blocks.shape[0]}, 2), got {bias.shape}')
        if not (np.all(np.isfinite(blocks)) and np.all(np.isfinite(bias))):
            raise ValueError('spectral weights must be finite')
        object.__setattr__(self, 'blocks', blocks)
        object.__setattr__(self, 'bias', bias)

    @property
    def out_channels(self):
        return self.blocks.shape[0]

    @property
    def in_channels(self):
        return self.blocks.shape[1]

    @classmethod
    def identity(cls, channels):
        blocks = np.zeros((channels, channels, 2, 2, 1, 1))
        for c in range(channels):
            blocks[c, c, :, :, 0, 0] = np.eye(2)
        return cls(blocks, np.zeros((channels, 2)))

    @classmethod
    def zeros(cls, out_channels, in_channels):
        return cls(np.zeros((out_channels, in_channels, 2, 2, 1, 1)), np.zeros((out_channels, 2)))

    @classmethod
    def from_spatial_kernel(cls, kernel, channels, height, width):
        """Diagonal mixing equal to circular convolution with a small centred kernel."""
        kernel = np.asarray(kernel, dtype=np.float64)
        kh, kw = kernel.shape
        embedded = np.zeros((height, width))
        for u in range(kh):
            for v in range(kw):
                embedded[(u - kh // 2) % height, (v - kw // 2) % width] += kernel[u, v]
        response = fft.rfft2(embedded)
        blocks = np.zeros((channels, channels, 2, 2) + response.shape)
        for c in range(channels):
            blocks[c, c, 0, 0] = response.real
            blocks[c, c, 0, 1] = -response.imag
            blocks[c, c, 1, 0] = response.imag
            blocks[c, c, 1, 1] = response.real
        return cls(blocks, np.zeros((channels, 2)))


def spectral_transform(features, weights):
    """rfft2 -> per-frequency linear mixing of (real, imag) -> irfft2."""
    if features.split != features.channels:
        raise ShapeMismatchError('spectral transform expects an all-global tensor')
    if weights.in_channels != features.channels:
        raise ShapeMismatchError(f'weights expect {weights.in_channels} channels, got {features.channels}')
    height, width = features.spatial
    spectrum = fft.rfft2(features.data, axes=(-2, -1))
    stacked = np.stack([spectrum.real, spectrum.imag], axis=1)
    blocks = np.broadcast_to(weights.blocks, weights.blocks.shape[:4] + spectrum.shape[1:])
    mixed = np.einsum('oiabhw,ibhw->oahw', blocks, stacked) + weights.bias[:, :, np.newaxis, np.newaxis]
    out = fft.irfft2(mixed[:, 0] + 1j * mixed[:, 1], s=(height, width), axes=(-2, -1))
    return FeatureTensor(out, split=weights.out_channels)


def conv3x3(values, kernel):
    """Zero-padded 3x3 cross-correlation, kernel shape (O, I, 3, 3)."""
    out_channels, in_channels = kernel.shape[:2]
    height, width = values.shape[1:]
    if in_channels == 0 or out_channels == 0:
        return np.zeros((out_channels, height, width))
    padded = np.pad(values, ((0, 0), (1, 1), (1, 1)))
    patches = np.stack([padded[:, u:u + height, v:v + width] for u in range(3) for v in range(3)], axis=1)
    return np.einsum('oik,ikhw->ohw', kernel.reshape(out_channels, in_channels, 9), patches)


def pointwise(values, matrix):
    if matrix.size == 0 or values.shape[0] == 0:
        return np.zeros((matrix.shape[0],) + values.shape[1:])
    return np.einsum('oi,ihw->ohw', matrix, values)


def _he(rng, shape, fan_in):
    scale = np.sqrt(2.0 / fan_in) if fan_in else 0.0
    # float32-representable so saved weights round-trip exactly
    return (rng.standard_normal(shape) * scale).astype(np.float32).astype(np.float64)


@dataclass(frozen=True, eq=False)
class FFCWeights:
    local_to_local: np.ndarray
    global_to_local: np.ndarray
    local_to_global: np.ndarray
    spectral: SpectralWeights
    bias_local: np.ndarray
    bias_global: np.ndarray

    @property
    def in_local(self):
        return self.local_to_local.shape[1]

    @property
    def in_global(self):
        return self.global_to_local.shape[1]

    @property
    def out_local(self):
        return self.local_to_local.shape[0]

    @property
    def out_global(self):
        return self.local_to_global.shape[0]

    @classmethod
    def zeros(cls, in_local, in_global, out_local, out_global):
        return cls(
            np.zeros((out_local, in_local, 3, 3)),
            np.zeros((out_local, in_global, 3, 3)),
            np.zeros((out_global, in_local)),
            SpectralWeights.zeros(out_global, in_global),
            np.zeros(out_local),
            np.zeros(out_global),
        )

    @classmethod
    def random(cls, rng, in_local, in_global, out_local, out_global):
        fan_local = 9 * (in_local + in_global)
        return cls(
            _he(rng, (out_local, in_local, 3, 3), fan_local),
            _he(rng, (out_local, in_global, 3, 3), fan_local),
            _he(rng, (out_global, in_local), in_local + in_global),
            SpectralWeights(_he(rng, (out_global, in_global, 2, 2, 1, 1), 2 * in_global), np.zeros((out_global, 2))),
            np.zeros(out_local),
            np.zeros(out_global),
        )

    def parameters(self):
        return {
            'local_to_local': self.local_to_local,
            'global_to_local': self.global_to_local,
            'local_to_global': self.local_to_global,
            'spectral_blocks': self.spectral.blocks,
            'spectral_bias': self.spectral.bias,
            'bias_local': self.bias_local,
            'bias_global': self.bias_global,
        }

    @classmethod
    def from_parameters(cls, params):
        return cls(
            params['local_to_local'],
            params['global_to_local'],
            params['local_to_global'],
            SpectralWeights(params['spectral_blocks'], params['spectral_bias']),
            params['bias_local'],
            params['bias_global'],
        )


def ffc_block(x, weights):
    """Four FFC paths summed per destination stream, then ReLU.

    local->local and global->local are 3x3 convolutions, local->global is a
    1x1 convolution, global->global is the spectral transform.
    """
    local, glob = x.local_part, x.global_part
    if local.shape[0] != weights.in_local or glob.shape[0] != weights.in_global:
        raise ShapeMismatchError(
            f'block expects {weights.in_local} local + {weights.in_global} global channels, '
            f'got {local.shape[0]} + {glob.shape[0]}'
        )
    out_local = (conv3x3(local, weights.local_to_local) + conv3x3(glob, weights.global_to_local)
                 + weights.bias_local[:, np.newaxis, np.newaxis])
    out_global = pointwise(local, weights.local_to_global) + weights.bias_global[:, np.newaxis, np.newaxis]
    if glob.shape[0] and weights.out_global:
        out_global = out_global + spectral_transform(FeatureTensor(glob, glob.shape[0]), weights.spectral).data
    out = np.maximum(np.concatenate([out_global, out_local]), 0.0)
    return FeatureTensor(out, split=weights.out_global)


@dataclass(frozen=True, eq=False)
class PointwiseWeights:
    """1x1 channel mixing: `matrix` (C_out, C_in) and `bias` (C_out,)."""
    matrix: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        matrix = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        bias = np.atleast_1d(np.asarray(self.bias, dtype=np.float64))
        if bias.shape != (matrix.shape[0],):
            raise ShapeMismatchError(f'bias shape {bias.shape} does not match {matrix.shape[0]} outputs')
        if not (np.all(np.isfinite(matrix)) and np.all(np.isfinite(bias))):
            raise ValueError('weights must be finite')
        object.__setattr__(self, 'matrix', matrix)
        object.__setattr__(self, 'bias', bias)

    def parameters(self):
        return {'matrix': self.matrix, 'bias': self.bias}

    def apply(self, values):
        return pointwise(values, self.matrix) + self.bias[:, np.newaxis, np.newaxis]


class SAMWeights(PointwiseWeights):
    """Conv1x1 of the structural attention gate (disparity channels -> FFC channels)."""


def _values(tensor):
    return tensor.data if isinstance(tensor, FeatureTensor) else np.asarray(tensor, dtype=np.float64)


def sam_fuse(ffc_features, disp_features, weights):
    """F'_ffc = F_ffc * sigmoid(W F_disp + b), gated per pixel and per channel."""
    structural = _values(ffc_features)
    disparity = _values(disp_features)
    if structural.shape[1:] != disparity.shape[1:]:
        raise ShapeMismatchError(f'spatial mismatch: {structural.shape[1:]} vs {disparity.shape[1:]}')
    if weights.matrix.shape != (structural.shape[0], disparity.shape[0]):
        raise ShapeMismatchError(f'SAM weights {weights.matrix.shape} do not map '
                                 f'{disparity.shape[0]} -> {structural.shape[0]} channels')
    gate = expit(weights.apply(disparity))
    split = ffc_features.split if isinstance(ffc_features, FeatureTensor) else 0
    return FeatureTensor(structural * gate, split=split)


def concat_fuse(ffc_features, disp_features, weights):
    """Ablation fusion: concatenate, then project back with a 1x1 convolution."""
    stacked = np.concatenate([ffc_features.data, _values(disp_features)])
    return FeatureTensor(weights.apply(stacked), split=ffc_features.split)


# ---------- periodicity ----------

def _window_starts(length, window):
    starts = list(range(0, length - window + 1, window // 2))
    if starts[-1] != length - window:
        starts.append(length - window)
    return np.array(starts)


def _neighbourhood(window, ky, kx):
    mask = np.zeros((window, window), dtype=bool)
    rows = [(ky + dy) % window for dy in (-1, 0, 1)]
    cols = [(kx + dx) % window for dx in (-1, 0, 1)]
    mask[np.ix_(rows, cols)] = True
    return mask


def periodicity_score(gray, window=32):
    """Share of non-DC spectral energy in the dominant peak and its harmonics.

    Scores are computed on Hann-tapered windows placed every window/2 pixels
    and interpolated bilinearly between window centres.
    """
    values = gray.data[0] if hasattr(gray, 'channels') else np.asarray(gray, dtype=np.float64)
    values = values.astype(np.float64)
    height, width = values.shape
    if window < 4 or window & (window - 1):
        raise ValueError(f'window must be a power of two >= 4, got {window}')
    if window > height or window > width:
        raise ValueError(f'window {window} larger than image {height}x{width}')

    taper = np.outer(windows.hann(window, sym=False), windows.hann(window, sym=False))
    starts_y = _window_starts(height, window)
    starts_x = _window_starts(width, window)
    patches = sliding_window_view(values, (window, window))[np.ix_(starts_y, starts_x)]
    weighted_mean = np.einsum('yxij,ij->yx', patches, taper) / taper.sum()
    tapered = (patches - weighted_mean[..., np.newaxis, np.newaxis]) * taper
    power = np.abs(fft.fft2(tapered, axes=(-2, -1))) ** 2

    dc = _neighbourhood(window, 0, 0)
    power[..., dc] = 0.0
    totals = power.sum(axis=(-2, -1))

    scores = np.zeros(totals.shape)
    half = window // 2
    for iy, ix in np.ndindex(totals.shape):
        total = totals[iy, ix]
        if total <= 1e-18:
            continue
        spectrum = power[iy, ix]
        ky, kx = np.unravel_index(np.argmax(spectrum), spectrum.shape)
        ky = ky - window if ky > half else ky
        kx = kx - window if kx > half else kx
        captured = np.zeros((window, window), dtype=bool)
        for harmonic in range(1, PERIODICITY_HARMONICS + 1):
            if max(abs(harmonic * ky), abs(harmonic * kx)) > half:
                break
            for sign in (1, -1):
                captured |= _neighbourhood(window, sign * harmonic * ky, sign * harmonic * kx)
        scores[iy, ix] = min(1.0, spectrum[captured & ~dc].sum() / total)

    centres_y = starts_y + (window - 1) / 2.0
    centres_x = starts_x + (window - 1) / 2.0
    rows = np.stack([np.interp(np.arange(width), centres_x, row) for row in scores])
    return np.stack([np.interp(np.arange(height), centres_y, column) for column in rows.T], axis=1)


# ---------- toy network assembly ----------

def _pool(tensor):
    channels, height, width = tensor.data.shape
    pooled = tensor.data.reshape(channels, height // 2, 2, width // 2, 2).mean(axis=(2, 4))
    return FeatureTensor(pooled, tensor.split)


def _upsample(tensor):
    return FeatureTensor(np.repeat(np.repeat(tensor.data, 2, axis=1), 2, axis=2), tensor.split)


def _add(a, b):
    return FeatureTensor(a.data + b.data, a.split)


@dataclass(frozen=True, eq=False)
class FreqDPWeights:
    width: int
    split: int
    disp_channels: int
    seed: int
    encoder: tuple
    decoder: tuple
    sam: tuple
    concat: tuple
    head: PointwiseWeights

    @classmethod
    def generate(cls, seed=0, width=8, global_ratio=0.5, disp_channels=3):
        """Deterministic He-initialised weights for a three-stage encoder/decoder."""
        rng = np.random.default_rng(seed)
        split = int(round(width * global_ratio))
        local = width - split
        encoder = [FFCWeights.random(rng, 3, 0, local, split)]
        encoder += [FFCWeights.random(rng, local, split, local, split) for _ in range(2)]
        decoder = tuple(FFCWeights.random(rng, local, split, local, split) for _ in range(3))
        sam = tuple(
            SAMWeights(_he(rng, (width, disp_channels), disp_channels), np.zeros(width)) for _ in range(3)
        )
        concat = tuple(
            PointwiseWeights(_he(rng, (width, width + disp_channels), width + disp_channels), np.zeros(width))
            for _ in range(3)
        )
        head = PointwiseWeights(_he(rng, (1, width), width), np.zeros(1))
        return cls(width, split, disp_channels, seed, tuple(encoder), decoder, sam, concat, head)

    def parameters(self):
        params = {}
        for group in ('encoder', 'decoder', 'sam', 'concat'):
            for index, block in enumerate(getattr(self, group)):
                for name, value in block.parameters().items():
                    params[f'{group}.{index}.{name}'] = value
        for name, value in self.head.parameters().items():
            params[f'head.{name}'] = value
        return params

    def header(self):
        return {
            'width': self.width,
            'split': self.split,
            'disp_channels': self.disp_channels,
            'seed': self.seed,
            'shapes': {name: list(value.shape) for name, value in self.parameters().items()},
        }


def _group(params, prefix, count):
    blocks = []
    for index in range(count):
        start = f'{prefix}.{index}.'
        blocks.append({name[len(start):]: value for name, value in params.items() if name.startswith(start)})
    return blocks


def save_weights(weights, directory):
    """JSON header plus one PFM payload per parameter block."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, value in weights.parameters().items():
        rows = int(np.prod(value.shape[:-1])) if value.ndim > 1 else 1
        write_pfm(value.reshape(rows, value.shape[-1]) if value.size else np.zeros((1, 1)), directory / f'{name}.pfm')
    (directory / 'weights.json').write_text(json.dumps(weights.header(), indent=2, sort_keys=True))


def load_weights(directory):
    directory = Path(directory)
    header = json.loads((directory / 'weights.json').read_text())
    params = {}
    for name, shape in header['shapes'].items():
        raw = read_pfm(directory / f'{name}.pfm')[0].astype(np.float64)
        params[name] = raw.reshape(shape) if np.prod(shape) else np.zeros(shape)
    return FreqDPWeights(
        width=header['width'],
        split=header['split'],
        disp_channels=header['disp_channels'],
        seed=header['seed'],
        encoder=tuple(FFCWeights.from_parameters(p) for p in _group(params, 'encoder', 3)),
        decoder=tuple(FFCWeights.from_parameters(p) for p in _group(params, 'decoder', 3)),
        sam=tuple(SAMWeights(p['matrix'], p['bias']) for p in _group(params, 'sam', 3)),
        concat=tuple(PointwiseWeights(p['matrix'], p['bias']) for p in _group(params, 'concat', 3)),
        head=PointwiseWeights(params['head.matrix'], params['head.bias']),
    )


def freqdp_forward(combined, pyramid, weights=None, seed=0, fusion='sam'):
    """Toy forward pass: FFC encoder/decoder with disparity fusion at H/2, H/4, H/8.

    `pyramid` holds three (channels, h, w) arrays at those scales. `fusion`
    selects SAM gating, concatenation + 1x1 projection, or no disparity input.
    """
    if fusion not in FUSION_MODES:
        raise ValueError(f'unknown fusion mode {fusion!r}')
    if weights is None:
        weights = FreqDPWeights.generate(seed=seed)
    image = combined.data.astype(np.float64)
    _, height, width = image.shape
    if height % 8 or width % 8:
        raise ShapeMismatchError(f'image dimensions must be divisible by 8, got {height}x{width}')
    expected = [(height // s, width // s) for s in (2, 4, 8)]
    pyramid = [np.asarray(level, dtype=np.float64) for level in pyramid]
    if [level.shape[1:] for level in pyramid] != expected:
        raise ShapeMismatchError(f'pyramid shapes {[p.shape for p in pyramid]} do not match {expected}')

    def fuse(tensor, level):
        if fusion == 'sam':
            return sam_fuse(tensor, pyramid[level], weights.sam[level])
        if fusion == 'concat':
            return concat_fuse(tensor, pyramid[level], weights.concat[level])
        return tensor

    stem = _pool(FeatureTensor(image, split=0))
    enc1 = ffc_block(stem, weights.encoder[0])
    enc2 = ffc_block(_pool(enc1), weights.encoder[1])
    enc3 = ffc_block(_pool(enc2), weights.encoder[2])

    dec3 = fuse(ffc_block(enc3, weights.decoder[0]), 2)
    dec2 = fuse(ffc_block(_add(_upsample(dec3), enc2), weights.decoder[1]), 1)
    dec1 = fuse(ffc_block(_add(_upsample(dec2), enc1), weights.decoder[2]), 0)

    logits = weights.head.apply(_upsample(dec1).data)[0]
    return MaskImage(expit(logits))
