"""Row-ordering primitives shared by the fact store and the runtime kernels.

Tables are lists of equal-length numpy columns.  Every ordering decision in the
engine (sort, unique, merge, membership) goes through :func:`order_keys`, which
maps each column to an ``int64`` array whose natural order is the tuple order:
integers and symbol ids by value, floats by IEEE total order.
"""

from __future__ import annotations

import numpy as np

VALUE_DTYPES = {
    "i64": np.dtype(np.int64),
    "f64": np.dtype(np.float64),
    "sym": np.dtype(np.uint32),
    "u8": np.dtype(np.uint8),
}

_LOW63 = np.int64(0x7FFFFFFFFFFFFFFF)


def order_key(col: np.ndarray) -> np.ndarray:
    """Map a column to int64 keys that sort in tuple order."""
    if col.dtype == np.float64:
        bits = col.view(np.int64)
        # flip magnitude bits of negatives so signed compare gives total order
        return bits ^ ((bits >> 63) & _LOW63)
    return col.astype(np.int64, copy=False)


def order_keys(cols) -> list[np.ndarray]:
    return [order_key(np.asarray(c)) for c in cols]


def _pack(keys: list[np.ndarray]) -> np.ndarray | None:
    """Fold several key columns into one int64 when their ranges fit in 62 bits."""
    if len(keys) == 1:
        return keys[0]
    shifts = []
    total = 0
    lows = []
    for k in keys:
        lo, hi = int(k.min()), int(k.max())
        span = hi - lo
        bits = max(1, span.bit_length())
        lows.append(lo)
        shifts.append(bits)
        total += bits
        if total > 62:
            return None
    packed = np.zeros(len(keys[0]), dtype=np.int64)
    for k, lo, bits in zip(keys, lows, shifts):
        packed <<= bits
        packed |= (k - lo)
    return packed


def lex_order(keys: list[np.ndarray], n: int | None = None) -> np.ndarray:
    """Stable permutation sorting rows lexicographically by ``keys``."""
    if not keys:
        return np.arange(n or 0, dtype=np.int64)
    if len(keys[0]) == 0:
        return np.zeros(0, dtype=np.int64)
    packed = _pack(keys)
    if packed is not None:
        return np.argsort(packed, kind="stable")
    return np.lexsort(keys[::-1])


def row_change(keys: list[np.ndarray], n: int) -> np.ndarray:
    """Boolean mask, True at row i>0 when row i differs from row i-1 (row 0 is True)."""
    change = np.zeros(n, dtype=bool)
    if n == 0:
        return change
    change[0] = True
    for k in keys:
        change[1:] |= k[1:] != k[:-1]
    return change


def group_starts(keys: list[np.ndarray], n: int) -> np.ndarray:
    return np.flatnonzero(row_change(keys, n))


def is_sorted(keys: list[np.ndarray], n: int) -> bool:
    if n < 2 or not keys:
        return True
    # row i-1 <= row i lexicographically
    decided = np.zeros(n - 1, dtype=bool)
    for k in keys:
        lt = k[:-1] < k[1:]
        gt = k[:-1] > k[1:]
        if np.any(gt & ~decided):
            return False
        decided |= lt
    return True


def match_sorted(base_keys: list[np.ndarray], nb: int, probe_keys: list[np.ndarray], npr: int):
    """For each probe row, the index of an equal row in ``base`` (which must be
    duplicate-free), or -1.  Neither side needs to be sorted."""
    if npr == 0:
        return np.zeros(0, dtype=np.int64)
    if nb == 0:
        return np.full(npr, -1, dtype=np.int64)
    if not base_keys:
        return np.zeros(npr, dtype=np.int64)
    both = [np.concatenate([b, p]) for b, p in zip(base_keys, probe_keys)]
    order = lex_order(both)
    sorted_keys = [k[order] for k in both]
    starts = row_change(sorted_keys, nb + npr)
    group_id = np.cumsum(starts) - 1
    first = order[np.flatnonzero(starts)]
    leader = first[group_id]
    out = np.empty(nb + npr, dtype=np.int64)
    # base rows sort before equal probe rows (stable, base concatenated first)
    out[order] = np.where(leader < nb, leader, -1)
    return out[nb:]
