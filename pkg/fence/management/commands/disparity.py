from pathlib import Path

import cv2
import numpy as np

from fence.costvol import (
    aggregate_cost,
    build_cost_volume,
    disparity_argmax,
    dump_cost_volume,
    extract_features,
)
from fence.imagecore import VERTICAL, Image, load_frame, save_png, write_pfm
from fence.serializers import CostVolumeParamsSerializer

from ._base import FenceCommand


def colorize(values, upper):
    """Inferno rendering of `values / upper` as an RGB image."""
    scaled = np.clip(values / upper, 0.0, 1.0) if upper > 0 else np.zeros_like(values)
    bgr = cv2.applyColorMap(np.round(scaled * 255).astype(np.uint8), cv2.COLORMAP_INFERNO)
    return Image(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).transpose(2, 0, 1) / 255.0)


class Command(FenceCommand):
    help = 'Estimate half-resolution dual-pixel disparity and confidence for one frame.'
    subcommand = 'disparity'

    def add_command_arguments(self, parser):
        parser.add_argument('--frame', type=Path, required=True, help='frame directory (left/right/combined)')
        parser.add_argument('--out', type=Path, required=True)
        parser.add_argument('--dmax', type=float, default=None, help='largest disparity, half-resolution pixels')
        parser.add_argument('--step', type=float, default=None)
        parser.add_argument('--window', type=int, default=None, help='aggregation box size')
        parser.add_argument('--vertical', action='store_true', help='the frame disparity runs vertically')
        parser.add_argument('--dump-volume', action='store_true', help='also write the aggregated cost volume')

    def run(self, options):
        params, echo = self.config_block(CostVolumeParamsSerializer, 'cost_volume', {
            'd_max': options['dmax'], 'step': options['step'], 'window': options['window'],
        })
        frame = load_frame(options['frame'], self.disparity_axis(options))

        with self.timer.stage('cost_volume'):
            volume = build_cost_volume(extract_features(frame.left), extract_features(frame.right),
                                       params.d_max, params.step, self.threads)
            volume = aggregate_cost(volume, params.window)
        with self.timer.stage('argmax'):
            disparity, confidence = disparity_argmax(volume)

        out_dir = options['out']
        out_dir.mkdir(parents=True, exist_ok=True)
        d_values, c_values = disparity.values, confidence.values
        if frame.disparity_axis == VERTICAL:
            d_values, c_values = d_values.T, c_values.T
        write_pfm(d_values, out_dir / 'disparity.pfm')
        write_pfm(c_values, out_dir / 'confidence.pfm')
        save_png(colorize(d_values, params.d_max), out_dir / 'disparity.png', bit_depth=8)
        save_png(Image(np.clip(c_values, 0.0, 1.0)), out_dir / 'confidence.png', bit_depth=8)
        if options['dump_volume']:
            dump_cost_volume(volume, out_dir)

        stats = {
            'median_disparity': float(np.median(d_values)),
            'mean_confidence': float(np.mean(c_values)),
        }
        self.report(
            out_dir,
            arguments={key: options[key] for key in ('frame', 'out', 'vertical', 'dump_volume')},
            config={'cost_volume': echo, 'threads': self.threads},
            extra={'stats': stats},
        )
        self.stdout.write(f'median disparity {stats["median_disparity"]:.3f} px (half resolution)')
