"""Errors raised by the fence library.

Management commands turn any FenceError into a CommandError so the CLI exits
with status 1 and a one-line diagnostic.
"""


class FenceError(Exception):
    """Base class for every library failure."""


class ImageFormatError(FenceError):
    """Unreadable file, malformed header or unsupported sample format."""


class ShapeMismatchError(FenceError, ValueError):
    """Dimensions, channel counts or channel splits do not agree."""


class AugmentationRejected(FenceError):
    """An augmented fence mask became (nearly) empty."""

    def __init__(self, coverage):
        self.coverage = coverage
        super().__init__(f'augmented mask coverage {coverage:.5f} is below the minimum')


class MissingPredictionsError(FenceError):
    """A dataset evaluation found manifest records without predictions."""

    def __init__(self, sample_ids):
        self.sample_ids = list(sample_ids)
        super().__init__('missing predictions for: ' + ', '.join(self.sample_ids))