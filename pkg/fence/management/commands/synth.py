from pathlib import Path

from fence.serializers import SynthConfigSerializer
from fence.synthpipe import calibrate_stride, generate_dataset, load_assets, load_clean_frames

from ._base import FenceCommand, logger


class Command(FenceCommand):
    help = 'Generate a synthetic fenced dual-pixel dataset and its manifest.'
    subcommand = 'synth'

    def add_command_arguments(self, parser):
        parser.add_argument('--clean', type=Path, required=True,
                            help='directory of clean frames (frame folders or RGB PNGs)')
        parser.add_argument('--assets', type=Path, required=True,
                            help='directory of <name>.png fence textures with <name>_mask.png masks')
        parser.add_argument('--out', type=Path, required=True)
        parser.add_argument('--n', type=int, required=True, help='number of samples')
        parser.add_argument('--seed', type=int, default=None, help='base seed (overrides the config file)')
        parser.add_argument('--patches', action='store_true', help='also export square training patches')
        parser.add_argument('--patch', type=int, default=512)
        parser.add_argument('--stride', type=int, default=None,
                            help='patch stride (default: calibrated toward ~13.7k patches over 804 frames)')

    def run(self, options):
        seed = options['seed'] if options['seed'] is not None else self.raw_config.get('seed')
        config, echo = self.config_block(SynthConfigSerializer, 'synth', {'base_seed': seed})
        if options['n'] < 1:
            raise ValueError('--n must be positive')

        with self.timer.stage('load'):
            clean_frames = load_clean_frames(options['clean'])
            assets = load_assets(options['assets'])

        patch = stride = None
        if options['patches']:
            patch = options['patch']
            stride = options['stride']
            if stride is None:
                _, first = clean_frames[0]
                stride, per_frame = calibrate_stride(first.height, first.width, patch)
                logger.info('calibrated patch stride %d (%d patches per frame)', stride, per_frame)

        out_dir = options['out']
        with self.timer.stage('generate'):
            manifest = generate_dataset(clean_frames, assets, config, options['n'], out_dir,
                                        patch=patch, stride=stride, threads=self.threads)

        self.report(
            out_dir,
            arguments={key: options[key] for key in ('clean', 'assets', 'out', 'n', 'seed', 'patches', 'patch',
                                                     'stride')},
            config={'synth': echo, 'threads': self.threads},
            extra={'config_hash': manifest['config_hash'], 'splits': {k: len(v) for k, v in
                                                                      manifest['splits'].items()}},
        )
        self.stdout.write(f'wrote {options["n"]} samples to {out_dir}')
