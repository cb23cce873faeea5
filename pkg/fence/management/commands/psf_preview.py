from pathlib import Path

import cv2
import numpy as np

from fence.dpform import DEFAULT_GRID_SHAPE, expected_disparity, make_dp_psf_pair, parametric_psf_grid, save_psf_grid
from fence.imagecore import Image, save_png

from ._base import FenceCommand


def heatmap(kernel, zoom):
    taps = kernel.taps / kernel.taps.max()
    pixels = np.round(taps * 255).astype(np.uint8)
    pixels = cv2.resize(pixels, None, fx=zoom, fy=zoom, interpolation=cv2.INTER_NEAREST)
    bgr = cv2.applyColorMap(pixels, cv2.COLORMAP_INFERNO)
    return Image(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).transpose(2, 0, 1) / 255.0)


class Command(FenceCommand):
    help = 'Render the parametric dual-pixel PSFs at one blur scale.'
    subcommand = 'psf-preview'

    def add_command_arguments(self, parser):
        parser.add_argument('--alpha', type=float, required=True, help='blur scale')
        parser.add_argument('--out', type=Path, required=True)
        parser.add_argument('--zoom', type=int, default=16, help='pixels per kernel tap in the heatmaps')
        parser.add_argument('--grid', action='store_true', help='also write DPPG grid files')
        parser.add_argument('--grid-shape', type=int, nargs=2, default=list(DEFAULT_GRID_SHAPE),
                            metavar=('ROWS', 'COLS'))

    def run(self, options):
        alpha = options['alpha']
        if options['zoom'] < 1:
            raise ValueError('--zoom must be at least 1')
        kernels = dict(zip(('L', 'R', 'C'), make_dp_psf_pair(alpha)))

        out_dir = options['out']
        out_dir.mkdir(parents=True, exist_ok=True)
        for view, kernel in kernels.items():
            save_png(heatmap(kernel, options['zoom']), out_dir / f'k_{view}.png', bit_depth=8)
        if options['grid']:
            for view, grid in parametric_psf_grid(alpha, tuple(options['grid_shape'])).items():
                save_psf_grid(grid, out_dir / f'psf_{view}.dppg')

        disparity = expected_disparity(alpha)
        self.report(
            out_dir,
            arguments={key: options[key] for key in ('alpha', 'out', 'zoom', 'grid', 'grid_shape')},
            config={'alpha': alpha},
            extra={'expected_disparity': disparity, 'radius': kernels['C'].radius},
        )
        self.stdout.write(f'alpha {alpha}: radius {kernels["C"].radius}, expected disparity {disparity:.4f} px')
