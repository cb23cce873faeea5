from pathlib import Path

from fence.defence import segment_fence
from fence.imagecore import VERTICAL, load_frame, save_png

from ._base import FenceCommand


class Command(FenceCommand):
    help = 'Segment the fence in one dual-pixel frame.'
    subcommand = 'segment'

    def add_command_arguments(self, parser):
        parser.add_argument('--frame', type=Path, required=True)
        parser.add_argument('--out', type=Path, required=True)
        parser.add_argument('--mode', choices=('classical', 'learned-toy'), default=None)
        parser.add_argument('--cues', choices=('dual', 'geometry', 'structure'), default=None)
        parser.add_argument('--vertical', action='store_true')

    def run(self, options):
        cfg, echo = self.segment_config({'mode': options['mode'], 'cues': options['cues']})
        frame = load_frame(options['frame'], self.disparity_axis(options))
        with self.timer.stage('segment'):
            mask = segment_fence(frame, cfg, self.threads)

        out_dir = options['out']
        out_dir.mkdir(parents=True, exist_ok=True)
        save_png(mask.transposed() if frame.disparity_axis == VERTICAL else mask, out_dir / 'mask.png', bit_depth=8)
        self.report(
            out_dir,
            arguments={key: options[key] for key in ('frame', 'out', 'vertical')},
            config={'segment': echo, 'threads': self.threads},
            extra={'mask_coverage': mask.coverage},
        )
        self.stdout.write(f'mask coverage {mask.coverage:.4f}')
