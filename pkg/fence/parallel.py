import logging
from concurrent.futures import ThreadPoolExecutor

from django.conf import settings

logger = logging.getLogger(__name__)


def resolve_threads(threads=None):
    """`threads` wins; otherwise DP_DEFENCE_THREADS via settings; never below 1."""
    if threads is None:
        threads = getattr(settings, 'FENCE_THREADS', 1) if settings.configured else 1
    return max(1, int(threads))


def ordered_map(func, items, threads=None):
    """Map `func` over `items`, returning results in input order.

    Work items must be independent; callers combine the results sequentially,
    so the outcome does not depend on the number of workers.
    """
    items = list(items)
    workers = min(resolve_threads(threads), max(1, len(items)))
    if workers == 1:
        return [func(item) for item in items]
    logger.debug('dispatching %d items over %d threads', len(items), workers)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items))
