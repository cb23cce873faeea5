import json
import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from rest_framework.exceptions import ValidationError

from fence.exceptions import FenceError
from fence.imagecore import HORIZONTAL, VERTICAL
from fence.reporting import StageTimer, write_run_report
from fence.serializers import RunConfigSerializer, SegmentConfigSerializer, parse_config

logger = logging.getLogger('fence.commands')


def _flatten(detail, prefix=''):
    if isinstance(detail, dict):
        for key, value in detail.items():
            yield from _flatten(value, f'{prefix}{key}.')
    elif isinstance(detail, list):
        for value in detail:
            yield from _flatten(value, prefix)
    else:
        yield f'{prefix.rstrip(".")}: {detail}' if prefix else str(detail)


class FenceCommand(BaseCommand):
    """Shared `--threads` / `--config` handling, error translation and run reports.

    Subcommands implement `add_command_arguments` and `run(options)`.
    """
    requires_system_checks = []
    subcommand = None

    def add_arguments(self, parser):
        parser.add_argument('--threads', type=int, default=None,
                            help='worker threads (default: DP_DEFENCE_THREADS or the config file)')
        parser.add_argument('--config', type=Path, default=None, help='JSON run configuration')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            self.raw_config = self.read_config(options['config'])
            self.threads = self.resolve_threads(options['threads'])
            self.timer = StageTimer()
            self.run(options)
        except ValidationError as exc:
            raise CommandError('invalid configuration: ' + '; '.join(_flatten(exc.detail))) from exc
        except (FenceError, ValueError, OSError) as exc:
            raise CommandError(str(exc)) from exc

    def read_config(self, path):
        if path is None:
            return {}
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FenceError(f'{path} is not valid JSON: {exc}') from exc
        serializer = RunConfigSerializer(data=data)
        serializer.is_valid(raise_exception=True)
        return data

    def resolve_threads(self, flag):
        if flag is not None:
            if flag < 1:
                raise FenceError('--threads must be at least 1')
            return flag
        return self.raw_config.get('threads', settings.FENCE_THREADS)

    def config_block(self, serializer_class, key, overrides=None):
        """Validated config for one block: JSON values first, then non-None flag overrides."""
        return self.parse_block(serializer_class, self.raw_config.get(key, {}), overrides)

    def segment_config(self, overrides=None):
        """The `segment` block; a top-level `cost_volume` block fills the keys `segment.cost_volume` leaves out."""
        data = dict(self.raw_config.get('segment', {}))
        shared = self.raw_config.get('cost_volume')
        if shared is not None:
            data['cost_volume'] = {**shared, **data.get('cost_volume', {})}
        return self.parse_block(SegmentConfigSerializer, data, overrides)

    def parse_block(self, serializer_class, data, overrides):
        data = dict(data)
        for name, value in (overrides or {}).items():
            if value is not None:
                data[name] = value
        return parse_config(serializer_class, data)

    def disparity_axis(self, options):
        return VERTICAL if options.get('vertical') else HORIZONTAL

    def report(self, out_dir, arguments, config, extra=None, files=None):
        arguments = {key: str(value) if isinstance(value, Path) else value for key, value in arguments.items()}
        return write_run_report(out_dir, self.subcommand, arguments, config, self.timer.timings,
                                extra=extra, files=files)

    def run(self, options):
        raise NotImplementedError
