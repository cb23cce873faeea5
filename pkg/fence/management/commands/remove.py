from pathlib import Path

from django.core.management.base import CommandError

from fence.defence import remove_fence
from fence.evalkit import load_manifest
from fence.imagecore import VERTICAL, load_frame, save_png
from fence.parallel import ordered_map

from ._base import FenceCommand


class Command(FenceCommand):
    help = 'Segment and remove the fence from one frame, or from every sample of a manifest.'
    subcommand = 'remove'

    def add_command_arguments(self, parser):
        source = parser.add_mutually_exclusive_group(required=True)
        source.add_argument('--frame', type=Path, help='frame directory (left/right/combined)')
        source.add_argument('--manifest', type=Path,
                            help='dataset manifest; predictions go to OUT/<sample_id>/')
        parser.add_argument('--out', type=Path, required=True)
        parser.add_argument('--vertical', action='store_true')

    def run(self, options):
        cfg, echo = self.segment_config()
        out_dir = options['out']
        axis = self.disparity_axis(options)

        def process(frame_dir, target):
            frame = load_frame(frame_dir, axis)
            restored, mask = remove_fence(frame, cfg, threads=1 if options['manifest'] else self.threads)
            if frame.disparity_axis == VERTICAL:
                restored, mask = restored.transposed(), mask.transposed()
            target.mkdir(parents=True, exist_ok=True)
            save_png(mask, target / 'mask.png', bit_depth=8)
            save_png(restored, target / 'restored.png')
            return mask.coverage

        with self.timer.stage('remove'):
            if options['frame']:
                coverage = {'frame': process(options['frame'], out_dir)}
            else:
                if options['vertical']:
                    raise CommandError('--vertical applies to single frames only')
                root = options['manifest'].parent
                records = load_manifest(options['manifest'])['records']
                values = ordered_map(
                    lambda record: process(root / record['files']['occluded'], out_dir / record['sample_id']),
                    records,
                    self.threads,
                )
                coverage = {record['sample_id']: value for record, value in zip(records, values)}

        self.report(
            out_dir,
            arguments={key: options[key] for key in ('frame', 'manifest', 'out', 'vertical')},
            config={'segment': echo, 'threads': self.threads},
            extra={'mask_coverage': coverage},
        )
        self.stdout.write(f'processed {len(coverage)} frame(s) into {out_dir}')
