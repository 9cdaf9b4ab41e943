"""Register memory: a bump arena and per-site buffer reuse.

Four modes, chosen by two switches:

* arena + reuse: registers are carved from a persistent arena; each alloc site
  remembers its capacity and over-allocates by ``growth`` when it is outgrown,
  so the arena footprint settles after a few iterations;
* arena only: exact-size carving from the persistent arena;
* reuse only: every site keeps its own buffers across iterations, regrown by
  ``growth`` when too small;
* neither: a fresh buffer for every register on every alloc.

``fresh`` counts system allocations (arena chunks or standalone buffers).  The
arena resets to offset zero between iterations; if it had to grow, its chunks
are consolidated into one chunk with headroom so later iterations fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ALIGN = 64
DEFAULT_ARENA = 32 << 20


def _round(n, a=ALIGN):
    return (n + a - 1) // a * a


class Arena:
    def __init__(self, size: int = DEFAULT_ARENA):
        self.chunks = [np.empty(max(ALIGN, size), dtype=np.uint8)]
        self.offset = 0
        self.used = 0
        self.high_water = 0
        self.grows = 0
        self.fresh = 1

    @property
    def size(self) -> int:
        return sum(len(c) for c in self.chunks)

    def alloc(self, nbytes: int) -> np.ndarray:
        nbytes = _round(max(nbytes, 0))
        cur = self.chunks[-1]
        if self.offset + nbytes > len(cur):
            newsize = max(2 * len(cur), _round(nbytes))
            self.chunks.append(np.empty(newsize, dtype=np.uint8))
            self.grows += 1
            self.fresh += 1
            self.offset = 0
            cur = self.chunks[-1]
        out = cur[self.offset: self.offset + nbytes]
        self.offset += nbytes
        self.used += nbytes
        self.high_water = max(self.high_water, self.used)
        return out

    def reset(self):
        if len(self.chunks) > 1:
            target = max(2 * self.high_water, len(self.chunks[0]))
            self.chunks = [np.empty(_round(target), dtype=np.uint8)]
            self.fresh += 1
        self.offset = 0
        self.used = 0


@dataclass
class AllocStats:
    fresh: int = 0
    reuse_hits: int = 0
    reuse_misses: int = 0
    arena_grows: int = 0
    static_allocs: int = 0
    bytes: int = 0
    per_iteration: list = field(default_factory=list)


class Allocator:
    def __init__(self, arena: bool = True, reuse: bool = True, growth: float = 1.5, arena_bytes: int = DEFAULT_ARENA):
        self.use_arena = arena
        self.use_reuse = reuse
        self.growth = growth
        self.arena = Arena(arena_bytes) if arena else None
        self.capacity: dict[int, int] = {}
        self.buffers: dict[int, list] = {}
        self.stats = AllocStats(fresh=1 if arena else 0)
        self._iter_start = self.stats.fresh

    def _site_capacity(self, site: int, n: int) -> int:
        if not self.use_reuse:
            return n
        cap = self.capacity.get(site)
        if cap is not None and n <= cap:
            self.stats.reuse_hits += 1
            return cap
        self.stats.reuse_misses += 1
        cap = max(n, math.ceil(n * self.growth))
        self.capacity[site] = cap
        return cap

    def alloc(self, site: int, dtypes, n: int, static: bool = False) -> list:
        """Buffers of at least ``n`` rows, one per dtype."""
        if static:
            self.stats.static_allocs += 1
            self.stats.fresh += 1
            return [np.empty(n, dtype=d) for d in dtypes]
        if self.use_arena:
            before = self.arena.fresh
            cap = self._site_capacity(site, n)
            out = []
            for d in dtypes:
                raw = self.arena.alloc(cap * d.itemsize)
                out.append(raw[: cap * d.itemsize].view(d))
            self.stats.fresh += self.arena.fresh - before
            self.stats.arena_grows = self.arena.grows
            self.stats.bytes += sum(cap * d.itemsize for d in dtypes)
            return out
        if self.use_reuse:
            bufs = self.buffers.get(site)
            if bufs is not None and n <= len(bufs[0]) and [b.dtype for b in bufs] == list(dtypes):
                self.stats.reuse_hits += 1
                return bufs
            cap = self._grow(site, n)
            bufs = [np.empty(cap, dtype=d) for d in dtypes]
            self.buffers[site] = bufs
            self.stats.fresh += 1
            self.stats.bytes += sum(cap * d.itemsize for d in dtypes)
            return bufs
        self.stats.fresh += 1
        self.stats.bytes += sum(n * d.itemsize for d in dtypes)
        return [np.empty(n, dtype=d) for d in dtypes]

    def _grow(self, site, n):
        self.stats.reuse_misses += 1
        old = self.capacity.get(site, 0)
        cap = max(n, math.ceil(max(n, old) * self.growth))
        self.capacity[site] = cap
        return cap

    def end_iteration(self):
        if self.arena is not None:
            before = self.arena.fresh
            self.arena.reset()
            self.stats.fresh += self.arena.fresh - before
        self.stats.per_iteration.append(self.stats.fresh - self._iter_start)
        self._iter_start = self.stats.fresh
