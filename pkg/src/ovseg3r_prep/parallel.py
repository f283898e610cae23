"""Thread-count resolution and a deterministic chunked map.

Work is split into fixed-size index ranges independent of the thread count,
and results are returned in range order, so outputs never depend on how many
workers ran.
"""

from __future__ import annotations

import logging
import os
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

from ovseg3r_prep.errors import ValidationError

logger = logging.getLogger(__name__)

THREADS_ENV = "OVSEG3R_THREADS"
DEFAULT_CHUNK = 65536

T = TypeVar("T")


def resolve_threads(threads: int | None = None) -> int:
    """Effective worker count.

    Precedence: explicit ``threads``, then ``OVSEG3R_THREADS``, then 0.
    Zero means one worker per CPU.

    Raises:
        ValidationError: If the value is negative or not an integer.
    """
    if threads is None:
        raw = os.getenv(THREADS_ENV, "").strip()
        try:
            threads = int(raw) if raw else 0
        except ValueError as e:
            raise ValidationError(
                f"{THREADS_ENV} must be an integer, got {raw!r}"
            ) from e
    if threads < 0:
        raise ValidationError(f"threads must be >= 0, got {threads}")
    if threads == 0:
        return os.cpu_count() or 1
    return threads


def chunk_ranges(total: int, chunk: int = DEFAULT_CHUNK) -> list[tuple[int, int]]:
    """Split ``range(total)`` into consecutive ``[start, stop)`` ranges."""
    if chunk < 1:
        raise ValidationError("chunk must be >= 1")
    return [(start, min(start + chunk, total)) for start in range(0, total, chunk)]


def chunked_map(
    func: Callable[[int, int], T],
    total: int,
    threads: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> list[T]:
    """Apply ``func(start, stop)`` to every chunk; results in chunk order."""
    ranges = chunk_ranges(total, chunk)
    if threads <= 1 or len(ranges) <= 1:
        return [func(start, stop) for start, stop in ranges]
    logger.debug("running %d chunks on %d threads", len(ranges), threads)
    with ThreadPoolExecutor(max_workers=threads) as executor:
        futures = [executor.submit(func, start, stop) for start, stop in ranges]
        return [future.result() for future in futures]
