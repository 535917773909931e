import os
from concurrent.futures import ProcessPoolExecutor

from .errors import ConfigError


def worker_count(default: int | None = None) -> int:
    """Concurrency cap from ``MISALIGN_THREADS`` (defaults to 1)."""
    raw = os.environ.get("MISALIGN_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"MISALIGN_THREADS must be an integer, got {raw!r}") from None
    return default or 1


def pmap(fn, items, workers: int | None = None) -> list:
    """Ordered map, in worker processes when more than one worker is allowed.

    Results do not depend on the worker count; every task carries its own seed.
    """
    items = list(items)
    workers = min(workers or worker_count(), len(items)) if items else 1
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))
