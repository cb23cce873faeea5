"""
Geometric branch: dual-pixel matching cost volume.

Features are computed at half resolution, the right features are shifted
with sub-pixel phase ramps, and C(p, d) = <F_L(p), F_R(p + d)> is evaluated
for d in [0, d_max] only: a fence in front of an in-focus background has a
unidirectional disparity.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import fft, ndimage

from .exceptions import ShapeMismatchError
from .imagecore import write_pfm
from .parallel import ordered_map

logger = logging.getLogger(__name__)

FEATURE_WINDOW = 9
FEATURE_CHANNELS = ('mean_removed', 'grad_x', 'grad_y', 'contrast')
# Regularizer of the local normalization, relative to the channel's mean energy.
NORMALIZATION_EPS = 1e-6
_NORMALIZATION_FLOOR = 1e-12


@dataclass(frozen=True)
class CostVolumeParams:
    d_max: float = 8.0
    step: float = 0.25
    window: int = 3

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError('disparity step must be positive')
        if self.d_max < 0:
            raise ValueError('d_max must be non-negative')
        if self.window < 1 or self.window % 2 != 1:
            raise ValueError('aggregation window must be a positive odd number')


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3:
            raise ShapeMismatchError(f'feature map must be (C, H, W), got {data.shape}')
        if not np.all(np.isfinite(data)):
            raise ValueError('feature map contains non-finite values')
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class CostVolume:
    disparities: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        disparities = np.array(self.disparities, dtype=np.float64, copy=True)
        scores = np.array(self.scores, dtype=np.float64, copy=True)
        if disparities.ndim != 1 or disparities.size == 0 or disparities[0] != 0.0:
            raise ValueError('disparities must be a non-empty list starting at 0')
        if np.any(np.diff(disparities) <= 0):
            raise ValueError('disparities must be strictly increasing')
        if scores.ndim != 3 or scores.shape[0] != disparities.size:
            raise ShapeMismatchError(f'scores {scores.shape} do not match {disparities.size} disparities')
        if not np.all(np.isfinite(scores)):
            raise ValueError('cost volume contains non-finite scores')
        disparities.setflags(write=False)
        scores.setflags(write=False)
        object.__setattr__(self, 'disparities', disparities)
        object.__setattr__(self, 'scores', scores)

    @property
    def d_max(self):
        return float(self.disparities[-1])

    @property
    def step(self):
        if self.disparities.size < 2:
            return 0.0
        return float(self.disparities[1] - self.disparities[0])


@dataclass(frozen=True, eq=False)
class DisparityMap:
    values: np.ndarray
    d_max: float


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    values: np.ndarray


def _local_normalize(channel):
    mean = ndimage.uniform_filter(channel, FEATURE_WINDOW, mode='reflect')
    variance = np.maximum(ndimage.uniform_filter(channel * channel, FEATURE_WINDOW, mode='reflect') - mean * mean, 0.0)
    energy = np.mean(channel * channel)
    return (channel - mean) / np.sqrt(variance + NORMALIZATION_EPS * energy + _NORMALIZATION_FLOOR)


def extract_features(gray):
    """Fixed four-channel filter bank at half resolution."""
    if gray.channels != 1:
        raise ShapeMismatchError('features are extracted from a single-channel view')
    height, width = gray.height, gray.width
    if height % 2 or width % 2 or height < 4 or width < 4:
        raise ShapeMismatchError(f'feature extraction needs even dimensions >= 4, got {height}x{width}')

    pooled = gray.data[0].astype(np.float64).reshape(height // 2, 2, width // 2, 2).mean(axis=(1, 3))
    mean_removed = pooled - ndimage.uniform_filter(pooled, FEATURE_WINDOW, mode='reflect')
    grad_x = np.gradient(pooled, axis=1)
    grad_y = np.gradient(pooled, axis=0)
    contrast = np.sqrt(ndimage.uniform_filter(mean_removed * mean_removed, FEATURE_WINDOW, mode='reflect'))
    channels = [mean_removed, grad_x, grad_y, contrast]
    return FeatureMap(np.stack([_local_normalize(channel) for channel in channels]))


def _phase_ramp(n, d):
    k = np.arange(n // 2 + 1)
    ramp = np.exp(-2j * np.pi * k * d / n)
    if n % 2 == 0:
        # Nyquist bin: real part of the ramp keeps the output real.
        ramp[-1] = np.cos(np.pi * d)
    return ramp


def phase_shift(feat, d):
    """Shift every row right by `d` pixels (circularly) via a Fourier phase ramp."""
    values = feat.data if isinstance(feat, FeatureMap) else np.asarray(feat, dtype=np.float64)
    n = values.shape[-1]
    if abs(d) > n / 2:
        raise ValueError(f'shift {d} exceeds half the width {n}')
    shifted = fft.irfft(fft.rfft(values, axis=-1) * _phase_ramp(n, d), n=n, axis=-1)
    return FeatureMap(shifted) if isinstance(feat, FeatureMap) else shifted


def disparity_grid(d_max, step):
    count = int(math.floor(d_max / step + 1e-9)) + 1
    return step * np.arange(count, dtype=np.float64)


def build_cost_volume(features_left, features_right, d_max=8.0, step=0.25, threads=None):
    if features_left.shape != features_right.shape:
        raise ShapeMismatchError(f'feature shapes differ: {features_left.shape} vs {features_right.shape}')
    if not step > 0:
        raise ValueError('disparity step must be positive')
    width = features_left.shape[-1]
    if d_max > width / 2:
        raise ValueError(f'd_max {d_max} exceeds half the feature width {width}')

    disparities = disparity_grid(d_max, step)
    spectrum = fft.rfft(features_right.data, axis=-1)
    left = features_left.data

    def plane(d):
        # F_R(p + d): shift the right features left by d.
        aligned = fft.irfft(spectrum * _phase_ramp(width, -d), n=width, axis=-1)
        return np.sum(left * aligned, axis=0)

    scores = np.stack(ordered_map(plane, disparities, threads))
    logger.debug('cost volume: %d planes of %dx%d', len(disparities), *scores.shape[1:])
    return CostVolume(disparities, scores)


def aggregate_cost(volume, window=3):
    """Box-average the scores over (d, y, x)."""
    if window < 1 or window % 2 != 1:
        raise ValueError('aggregation window must be a positive odd number')
    if any(window > size for size in volume.scores.shape):
        raise ValueError(f'window {window} larger than volume dimensions {volume.scores.shape}')
    if window == 1:
        return volume
    return CostVolume(volume.disparities, ndimage.uniform_filter(volume.scores, size=window, mode='nearest'))


def disparity_argmax(volume):
    """Sub-pixel argmax and peak-ratio confidence per pixel."""
    scores = volume.scores
    count = scores.shape[0]
    index = np.argmax(scores, axis=0)
    best = np.take_along_axis(scores, index[np.newaxis], axis=0)[0]

    below = np.take_along_axis(scores, np.clip(index - 1, 0, count - 1)[np.newaxis], axis=0)[0]
    above = np.take_along_axis(scores, np.clip(index + 1, 0, count - 1)[np.newaxis], axis=0)[0]
    curvature = below - 2.0 * best + above
    refinable = (index > 0) & (index < count - 1) & (curvature < 0)
    offset = np.zeros_like(best)
    offset[refinable] = 0.5 * (below - above)[refinable] / curvature[refinable]
    offset = np.clip(offset, -0.5, 0.5)
    disparity = np.clip(volume.disparities[index] + offset * volume.step, 0.0, volume.d_max)

    bounded = np.full((1,) + best.shape, -np.inf)
    neighbours = np.concatenate([bounded, scores, bounded])
    is_peak = (scores >= neighbours[:-2]) & (scores >= neighbours[2:])
    distance = np.abs(np.arange(count)[:, np.newaxis, np.newaxis] - index[np.newaxis])
    second = np.where(is_peak & (distance > 1), scores, -np.inf).max(axis=0)
    with np.errstate(divide='ignore', invalid='ignore'):
        ratio = np.maximum(second, 0.0) / best
    confidence = np.where(best > 0, np.clip(1.0 - ratio, 0.0, 1.0), 0.0)
    return DisparityMap(disparity, volume.d_max), ConfidenceMap(confidence)


def _pool2(maps):
    channels, height, width = maps.shape
    if height % 2 or width % 2:
        maps = np.pad(maps, ((0, 0), (0, height % 2), (0, width % 2)), mode='symmetric')
    _, height, width = maps.shape
    return maps.reshape(channels, height // 2, 2, width // 2, 2).mean(axis=(2, 4))


def disp_pyramid(volume, levels=3):
    """(d*, confidence, max score) maps at the volume scale and two 2x poolings below it."""
    disparity, confidence = disparity_argmax(volume)
    current = np.stack([disparity.values, confidence.values, volume.scores.max(axis=0)])
    pyramid = [current]
    for _ in range(levels - 1):
        current = _pool2(current)
        pyramid.append(current)
    return pyramid


def dump_cost_volume(volume, directory, stem='cost_volume'):
    """PFM stack (planes stacked vertically) plus a JSON sidecar with the disparity values."""
    directory = Path(directory)
    planes, height, width = volume.scores.shape
    write_pfm(volume.scores.reshape(planes * height, width), directory / f'{stem}.pfm')
    sidecar = {
        'disparities': [float(d) for d in volume.disparities],
        'plane_height': height,
        'plane_width': width,
    }
    (directory / f'{stem}.json').write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return directory / f'{stem}.pfm'
