"""Run reports: config echo, package versions, stage timings and output hashes."""
import hashlib
import json
import logging
import platform
import time
from contextlib import contextmanager
from importlib import metadata
from pathlib import Path

from django.conf import settings

import dp_defence

logger = logging.getLogger(__name__)

REPORT_NAME = 'run_report.json'
TRACKED_PACKAGES = (
    'Django',
    'djangorestframework',
    'python-decouple',
    'numpy',
    'scipy',
    'opencv-python-headless',
)


def sha256_file(path, chunk_size=1 << 20):
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(chunk_size), b''):
            digest.update(chunk)
    return digest.hexdigest()


def output_hashes(root, exclude=(REPORT_NAME,)):
    """SHA-256 of every file under `root`, keyed by POSIX path relative to it."""
    root = Path(root)
    hashes = {}
    for path in sorted(root.rglob('*')):
        if path.is_file() and path.name not in exclude:
            hashes[path.relative_to(root).as_posix()] = sha256_file(path)
    return hashes


def package_versions():
    versions = {'dp_defence': dp_defence.__version__, 'python': platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


class StageTimer:
    """Wall-clock seconds per named stage."""

    def __init__(self):
        self.timings = {}

    @contextmanager
    def stage(self, name):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - start, 6)
            logger.debug('stage %s took %.3fs', name, self.timings[name])


def write_run_report(out_dir, subcommand, arguments, config, timings, extra=None, files=None):
    """Write `run_report.json` into `out_dir` after every other output exists.

    `files` restricts hashing to the listed paths; by default every file under
    `out_dir` is hashed.
    """
    out_dir = Path(out_dir)
    if files is None:
        outputs = output_hashes(out_dir)
    else:
        outputs = {Path(path).relative_to(out_dir).as_posix(): sha256_file(path) for path in sorted(files)}
    report = {
        'schema_version': settings.FENCE_SCHEMA_VERSION,
        'subcommand': subcommand,
        'arguments': arguments,
        'config': config,
        'versions': package_versions(),
        'timings': timings,
        'outputs': outputs,
    }
    if extra:
        report.update(extra)
    path = out_dir / REPORT_NAME
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    logger.info('wrote %s (%d outputs hashed)', path, len(report['outputs']))
    return report
