"""`dp-defence <subcommand> [options]`: one binary over the fence management commands."""
import os
import sys

SUBCOMMANDS = {
    'synth': 'synth',
    'disparity': 'disparity',
    'segment': 'segment',
    'remove': 'remove',
    'eval': 'eval',
    'psf-preview': 'psf_preview',
}

USAGE = """usage: dp-defence <subcommand> [options]

subcommands:
  synth        generate a synthetic fenced dual-pixel dataset
  disparity    dual-pixel disparity and confidence maps for one frame
  segment      fence mask for one frame
  remove       fence mask plus inpainted restoration
  eval         score predictions against a dataset manifest
  psf-preview  render the dual-pixel PSFs at one blur scale

Run `dp-defence <subcommand> --help` for the options of a subcommand.
"""


def _exit_code(exc):
    if exc.code is None:
        return 0
    return exc.code if isinstance(exc.code, int) else 1


def main(argv=None):
    """Dispatch to a management command; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'dp_defence.settings')

    import django
    from django.core.management import load_command_class

    django.setup()

    if not argv:
        sys.stderr.write(USAGE)
        return 2
    if argv[0] in ('-h', '--help'):
        sys.stdout.write(USAGE)
        return 0
    if argv[0] not in SUBCOMMANDS:
        sys.stderr.write(f'dp-defence: unknown subcommand {argv[0]!r}\n\n{USAGE}')
        return 2

    command = load_command_class('fence', SUBCOMMANDS[argv[0]])
    try:
        command.run_from_argv(['dp-defence', argv[0], *argv[1:]])
    except SystemExit as exc:
        return _exit_code(exc)
    return 0
