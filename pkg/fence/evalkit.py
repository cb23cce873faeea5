"""
Evaluation metrics and dataset-level reports.

Masks are scored by pixel precision/recall/F1, restorations by PSNR (one
MSE over all RGB samples) and Gaussian-window SSIM.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from django.conf import settings

from .exceptions import MissingPredictionsError, ShapeMismatchError
from .imagecore import FRAME_FILES, Image, MaskImage, load_png
from .parallel import ordered_map
from .serializers import ManifestSerializer

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
HISTOGRAM_BINS = 1024

PSNR_MODE = 'single MSE over all RGB samples, identical images capped at 99 dB'
PREDICTION_FILES = ('mask.png', 'restored.png')


@dataclass(frozen=True)
class SegMetrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    zero_division: bool = False


@dataclass(frozen=True)
class QualityMetrics:
    psnr: float
    ssim: float
    masked_psnr: float = None


def _flags(mask):
    if not mask.is_binary:
        raise ValueError('segmentation metrics need binary masks')
    return mask.flags()


def precision_recall_f1(pred, gt):
    """Pixel counts; a zero denominator yields 0 and sets `zero_division`."""
    if pred.data.shape != gt.data.shape:
        raise ShapeMismatchError(f'mask shapes differ: {pred.data.shape} vs {gt.data.shape}')
    p, g = _flags(pred), _flags(gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    zero_division = tp + fp == 0 or tp + fn == 0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return SegMetrics(precision, recall, f1, tp, fp, fn, zero_division)


def _pair(a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(f'image shapes differ: {a.shape} vs {b.shape}')
    return a.data.astype(np.float64), b.data.astype(np.float64)


def _psnr_from_mse(mse, peak):
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def psnr(a, b, peak=1.0):
    x, y = _pair(a, b)
    return _psnr_from_mse(float(np.mean((x - y) ** 2)), peak)


def masked_psnr(a, b, mask, peak=1.0):
    """PSNR over the pixels flagged in `mask`; None when the mask is empty."""
    x, y = _pair(a, b)
    flags = mask.flags()
    if flags.shape != x.shape[1:]:
        raise ShapeMismatchError('mask and image dimensions differ')
    if not flags.any():
        return None
    return _psnr_from_mse(float(np.mean((x[:, flags] - y[:, flags]) ** 2)), peak)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    offsets = np.arange(size) - (size - 1) / 2.0
    weights = np.exp(-offsets ** 2 / (2 * sigma * sigma))
    return weights / weights.sum()


def _window_mean(values, taps):
    out = ndimage.correlate1d(values, taps, axis=-1, mode='reflect')
    out = ndimage.correlate1d(out, taps, axis=-2, mode='reflect')
    half = taps.size // 2
    return out[..., half:-half, half:-half]


def ssim_map(a, b, peak=1.0):
    """Per-window SSIM for windows fully inside the image, shape (C, H-10, W-10)."""
    x, y = _pair(a, b)
    if min(x.shape[1:]) < SSIM_WINDOW:
        raise ShapeMismatchError(f'image {x.shape[1:]} smaller than the {SSIM_WINDOW}px SSIM window')
    taps = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_x = _window_mean(x, taps)
    mu_y = _window_mean(y, taps)
    var_x = _window_mean(x * x, taps) - mu_x * mu_x
    var_y = _window_mean(y * y, taps) - mu_y * mu_y
    cov = _window_mean(x * y, taps) - mu_x * mu_y
    return ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))


def ssim(a, b, peak=1.0):
    return float(np.mean(ssim_map(a, b, peak)))


def histogram_match(src, ref, bins=HISTOGRAM_BINS):
    """Map each channel of `src` onto the empirical distribution of `ref`.

    Outputs are bin centres of `ref`'s occupied bins, so the mapping is
    monotone and exact to within one bin.
    """
    if src.channels != ref.channels:
        raise ShapeMismatchError('source and reference channel counts differ')
    centres = (np.arange(bins) + 0.5) / bins
    out = np.empty(src.shape, dtype=np.float64)
    for c in range(src.channels):
        src_bins = np.minimum((src.data[c].astype(np.float64) * bins).astype(np.int64), bins - 1)
        ref_bins = np.minimum((ref.data[c].astype(np.float64) * bins).astype(np.int64), bins - 1)
        src_cdf = np.cumsum(np.bincount(src_bins.ravel(), minlength=bins)) / src_bins.size
        ref_counts = np.bincount(ref_bins.ravel(), minlength=bins)
        occupied = ref_counts > 0
        ref_cdf = np.cumsum(ref_counts)[occupied] / ref_bins.size
        lookup = np.interp(src_cdf, ref_cdf, centres[occupied])
        out[c] = lookup[src_bins]
    return Image(np.clip(out, 0.0, 1.0))


# ---------- dataset evaluation ----------

def load_manifest(path):
    manifest = json.loads(Path(path).read_text())
    serializer = ManifestSerializer(data=manifest)
    serializer.is_valid(raise_exception=True)
    return manifest


def _gray_mask(path):
    image = load_png(path)
    return MaskImage.from_bool(image.data[0] >= 0.5)


def _rgb(path):
    image = load_png(path)
    if image.channels == 1:
        image = Image(np.repeat(image.data, 3, axis=0))
    return image


def evaluate_sample(root, record, prediction_dir, match_histograms=False):
    files = record['files']
    gt_mask = _gray_mask(root / files['mask'])
    clean = _rgb(root / files['clean'] / FRAME_FILES['combined'])
    occluded = _rgb(root / files['occluded'] / FRAME_FILES['combined'])
    pred_mask = _gray_mask(prediction_dir / 'mask.png')
    restored = _rgb(prediction_dir / 'restored.png')
    if match_histograms:
        restored = histogram_match(restored, clean)

    seg = precision_recall_f1(pred_mask, gt_mask)
    quality = QualityMetrics(psnr(restored, clean), ssim(restored, clean), masked_psnr(restored, clean, gt_mask))
    return {
        'sample_id': record['sample_id'],
        'split': record.get('split', 'train'),
        'segmentation': asdict(seg),
        'restoration': asdict(quality),
        'occluded_psnr': psnr(occluded, clean),
    }


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def evaluate_dataset(manifest_path, predictions_dir, match_histograms=False, threads=None):
    """Per-sample and mean metrics over every manifest record, in manifest order."""
    manifest_path = Path(manifest_path)
    predictions_dir = Path(predictions_dir)
    manifest = load_manifest(manifest_path)
    records = manifest['records']
    missing = [
        record['sample_id'] for record in records
        if not all((predictions_dir / record['sample_id'] / name).exists() for name in PREDICTION_FILES)
    ]
    if missing:
        raise MissingPredictionsError(missing)

    root = manifest_path.parent
    samples = ordered_map(
        lambda record: evaluate_sample(root, record, predictions_dir / record['sample_id'], match_histograms),
        records,
        threads,
    )
    mean = {
        'precision': _mean([s['segmentation']['precision'] for s in samples]),
        'recall': _mean([s['segmentation']['recall'] for s in samples]),
        'f1': _mean([s['segmentation']['f1'] for s in samples]),
        'psnr': _mean([s['restoration']['psnr'] for s in samples]),
        'ssim': _mean([s['restoration']['ssim'] for s in samples]),
        'masked_psnr': _mean([s['restoration']['masked_psnr'] for s in samples]),
        'occluded_psnr': _mean([s['occluded_psnr'] for s in samples]),
    }
    logger.info('evaluated %d samples: F1 %.4f, PSNR %.2f dB', len(samples), mean['f1'], mean['psnr'])
    return {
        'schema_version': settings.FENCE_SCHEMA_VERSION,
        'manifest': str(manifest_path),
        'predictions': str(predictions_dir),
        'psnr_mode': PSNR_MODE,
        'histogram_matched': match_histograms,
        'samples': samples,
        'mean': mean,
    }


def _cell(value, digits):
    return '-' if value is None else f'{value:.{digits}f}'


def format_tables(report):
    """Segmentation and restoration tables, one row per sample plus the mean."""
    rows = [(s['sample_id'], s['segmentation'], s['restoration'], s['occluded_psnr']) for s in report['samples']]
    mean = report['mean']
    seg_mean = {key: mean[key] for key in ('precision', 'recall', 'f1')}
    res_mean = {key: mean[key] for key in ('psnr', 'ssim', 'masked_psnr')}
    rows.append(('mean', seg_mean, res_mean, mean['occluded_psnr']))

    lines = ['Segmentation', f'{"sample":<10}{"precision":>11}{"recall":>9}{"f1":>9}']
    for name, seg, _, _ in rows:
        lines.append(f'{name:<10}{_cell(seg["precision"], 4):>11}{_cell(seg["recall"], 4):>9}'
                     f'{_cell(seg["f1"], 4):>9}')
    lines += ['', 'Restoration', f'{"sample":<10}{"psnr":>9}{"ssim":>9}{"fence psnr":>12}{"input psnr":>12}']
    for name, _, res, baseline in rows:
        lines.append(f'{name:<10}{_cell(res["psnr"], 2):>9}{_cell(res["ssim"], 4):>9}'
                     f'{_cell(res["masked_psnr"], 2):>12}{_cell(baseline, 2):>12}')
    return '\n'.join(lines)
