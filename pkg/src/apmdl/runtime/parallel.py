"""Fixed-size worker pool for splitting a kernel's row range into chunks."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

MIN_CHUNK = 16384


def default_threads() -> int:
    v = os.environ.get("APM_THREADS")
    if v:
        try:
            return max(1, int(v))
        except ValueError:
            pass
    return 1


class WorkerPool:
    def __init__(self, threads: int = 1, min_chunk: int = MIN_CHUNK):
        self.threads = max(1, int(threads))
        self.min_chunk = min_chunk
        self._ex = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def ranges(self, n: int):
        if self._ex is None or n < 2 * self.min_chunk:
            return [(0, n)]
        k = min(self.threads, max(1, n // self.min_chunk))
        step = -(-n // k)
        return [(lo, min(n, lo + step)) for lo in range(0, n, step)]

    def map(self, fn, n: int):
        """Run ``fn(lo, hi)`` over disjoint chunks of ``range(n)``; results in chunk order."""
        rs = self.ranges(n)
        if len(rs) == 1:
            return [fn(*rs[0])]
        return list(self._ex.map(lambda r: fn(*r), rs))

    def close(self):
        if self._ex is not None:
            self._ex.shutdown(wait=True)
            self._ex = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
