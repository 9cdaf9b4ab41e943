"""Open-addressing hash index with linear probing.

The table stores, per distinct build key, one slot holding a 32-bit hash
fragment and a group id.  A group is a run of build rows sharing the key inside
a stable permutation, so the index maps back to rows rather than storing
payloads.  Insertion claims slots in vectorised rounds: in each round every
pending key looks at its current slot, the lowest key index wins each empty
slot (a compare-and-swap in a real parallel table) and everyone else moves on
to the next slot.
"""

from __future__ import annotations

import math

import numpy as np

from ..columnar import lex_order, order_keys, row_change

SLOT_DTYPE = np.dtype([("frag", "u4"), ("grp", "i4")])
_SEED = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_LOW32 = np.uint64(0xFFFFFFFF)


class HashCapacityError(RuntimeError):
    pass


def next_pow2(n: int) -> int:
    return 1 if n <= 1 else 1 << (int(n) - 1).bit_length()


def capacity_for(n: int, occupancy: float) -> int:
    return next_pow2(max(1, math.ceil(n * occupancy)))


def _mix(x):
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def hash_keys(keys, n: int) -> np.ndarray:
    """64-bit hash of each row over int64 order keys."""
    h = np.full(n, _SEED, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for k in keys:
            h = _mix(h ^ k[:n].view(np.uint64))
    return h


def _slot_of(h, cap):
    bits = cap.bit_length() - 1
    if bits == 0:
        return np.zeros(len(h), dtype=np.int64)
    return (h >> np.uint64(64 - bits)).astype(np.int64)


class HashIndex:
    def __init__(self, table: np.ndarray, width: int):
        self.table = table
        self.capacity = len(table)
        self.width = width
        self.n_rows = 0
        self.keys: list = []
        self.perm = np.zeros(0, dtype=np.int64)
        self.start = np.zeros(0, dtype=np.int64)
        self.count = np.zeros(0, dtype=np.int64)
        self.rep = np.zeros(0, dtype=np.int64)
        self.rounds = 0
        self.resized = False

    @property
    def groups(self):
        return len(self.start)

    def occupied(self) -> int:
        return int((self.table["grp"] >= 0).sum())

    def lookup_rows(self, g: int) -> np.ndarray:
        return self.perm[self.start[g]: self.start[g] + self.count[g]]


def build(table: np.ndarray, key_cols, n: int, pool=None, retry_table=None) -> HashIndex:
    """Build an index over the first ``n`` rows of ``key_cols`` into ``table``.

    ``retry_table`` is a callable returning a larger table, used once when the
    distinct keys do not fit.
    """
    keys = order_keys([c[:n] for c in key_cols])
    idx = HashIndex(table, len(keys))
    idx.n_rows = n
    idx.keys = keys
    if n == 0:
        table["grp"] = -1
        return idx
    if not keys:
        idx.perm = np.arange(n, dtype=np.int64)
        idx.start = np.zeros(1, dtype=np.int64)
        idx.count = np.array([n], dtype=np.int64)
        idx.rep = np.zeros(1, dtype=np.int64)
        table["grp"] = -1
        table["grp"][0] = 0
        return idx
    order = lex_order(keys, n)
    starts = np.flatnonzero(row_change([k[order] for k in keys], n))
    idx.perm = order
    idx.start = starts
    idx.count = np.diff(np.append(starts, n))
    idx.rep = order[starts]
    G = len(starts)
    if G > idx.capacity:
        if retry_table is None:
            raise HashCapacityError(f"{G} keys do not fit a table of {idx.capacity} slots")
        table = retry_table(next_pow2(2 * n))
        if G > len(table):
            raise HashCapacityError(f"{G} keys do not fit a table of {len(table)} slots after resizing")
        idx.table, idx.capacity, idx.resized = table, len(table), True
    _insert(idx, [k[idx.rep] for k in keys], G, pool)
    return idx


def _insert(idx: HashIndex, rep_keys, G: int, pool):
    table, cap = idx.table, idx.capacity
    table["grp"] = -1
    table["frag"] = 0
    h = _hash_chunked(rep_keys, G, pool)
    pos = _slot_of(h, cap)
    frag = (h & _LOW32).astype(np.uint32)
    mask = cap - 1
    pending = np.arange(G, dtype=np.int64)
    grp = table["grp"]
    rounds = 0
    while pending.size:
        rounds += 1
        if rounds > cap + 1:
            raise HashCapacityError("probe sequence exceeded table capacity")
        p = pos[pending]
        empty = grp[p] < 0
        won = np.zeros(pending.size, dtype=bool)
        if empty.any():
            cand = np.flatnonzero(empty)
            cp = p[cand]
            o = np.argsort(cp, kind="stable")  # pending is ascending, so the stable sort keeps the lowest first
            cps = cp[o]
            first = np.ones(len(cps), dtype=bool)
            first[1:] = cps[1:] != cps[:-1]
            winners = cand[o[first]]
            grp[cps[first]] = pending[winners]
            table["frag"][cps[first]] = frag[pending[winners]]
            won[winners] = True
        losers = pending[~won]
        pos[losers] = (pos[losers] + 1) & mask
        pending = losers
    idx.rounds = rounds


def _hash_chunked(keys, n, pool):
    if pool is None or n == 0:
        return hash_keys(keys, n)
    parts = pool.map(lambda lo, hi: hash_keys([k[lo:hi] for k in keys], hi - lo), n)
    return np.concatenate(parts) if len(parts) > 1 else parts[0]


def probe(idx: HashIndex, probe_cols, n: int, pool=None) -> np.ndarray:
    """Group id matched by each probe row, or -1."""
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if idx.n_rows == 0:
        return np.full(n, -1, dtype=np.int64)
    if idx.width == 0:
        return np.zeros(n, dtype=np.int64)
    keys = order_keys([c[:n] for c in probe_cols])
    if pool is None:
        return _probe_range(idx, keys, 0, n)
    parts = pool.map(lambda lo, hi: _probe_range(idx, keys, lo, hi), n)
    return np.concatenate(parts) if len(parts) > 1 else parts[0]


def _probe_range(idx, keys, lo, hi):
    keys = [k[lo:hi] for k in keys]
    m = hi - lo
    h = hash_keys(keys, m)
    pos = _slot_of(h, idx.capacity)
    frag = (h & _LOW32).astype(np.uint32)
    mask = idx.capacity - 1
    res = np.full(m, -1, dtype=np.int64)
    pending = np.arange(m, dtype=np.int64)
    grp, tfrag = idx.table["grp"], idx.table["frag"]
    steps = 0
    # a full table has no empty slot to stop at; after one lap every key still
    # pending is absent
    while pending.size and steps < idx.capacity:
        steps += 1
        p = pos[pending]
        g = grp[p].astype(np.int64)
        live = g >= 0
        hit = live & (tfrag[p] == frag[pending])
        if hit.any():
            cand = np.flatnonzero(hit)
            rows = idx.rep[g[cand]]
            eq = np.ones(len(cand), dtype=bool)
            for bk, pk in zip(idx.keys, keys):
                eq &= bk[rows] == pk[pending[cand]]
            hit[cand[~eq]] = False
            res[pending[hit]] = g[hit]
        more = live & ~hit
        pending = pending[more]
        pos[pending] = (pos[pending] + 1) & mask
    return res


def count(idx: HashIndex, probe_cols, n: int, pool=None) -> np.ndarray:
    g = probe(idx, probe_cols, n, pool)
    out = np.zeros(n, dtype=np.int64)
    hit = g >= 0
    out[hit] = idx.count[g[hit]]
    return out


def join(idx: HashIndex, probe_cols, n: int, counts, offsets, total: int, pool=None):
    """``(i_l, i_r)``: build-row and probe-row index of every matching pair,
    ordered by probe row then build row."""
    g = probe(idx, probe_cols, n, pool)
    counts = counts[:n]
    offsets = offsets[:n]

    def emit(lo, hi):
        c = counts[lo:hi]
        ir = np.repeat(np.arange(lo, hi, dtype=np.int64), c)
        within = np.arange(len(ir), dtype=np.int64) - np.repeat(offsets[lo:hi] - (offsets[lo] if hi > lo else 0), c)
        il = idx.perm[np.repeat(idx.start[np.maximum(g[lo:hi], 0)], c) + within]
        return il, ir

    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    parts = pool.map(emit, n) if pool is not None else [emit(0, n)]
    if len(parts) == 1:
        return parts[0]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
