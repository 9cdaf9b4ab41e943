"""Data-parallel kernels over plain numpy columns.

Each function takes value columns (lists of arrays of equal length), an
optional tag column and, where the work splits by rows, a :class:`WorkerPool`.
Sorting, deduplication and merging run on one thread.
"""

from __future__ import annotations

import numpy as np

from ..columnar import is_sorted, lex_order, match_sorted, order_keys, row_change
from . import bytecode, hashindex


class KernelError(RuntimeError):
    pass


def _chunked(pool, n, fn):
    if pool is None:
        return [fn(0, n)]
    return pool.map(fn, n)


def kernel_eval(bc: bytecode.Bytecode, cols, n: int, out_dtypes, pool=None):
    """Run a lambda over ``n`` rows.  Returns ``(outputs, ok)``; ``ok`` marks rows
    whose arithmetic was defined (None when every row was)."""
    if bc.column_map is not None:
        return [np.asarray(cols[i][:n], dtype=d) for i, d in zip(bc.column_map, out_dtypes)], None
    parts = _chunked(pool, n, lambda lo, hi: bytecode.run(bc, [c[lo:hi] for c in cols], hi - lo, out_dtypes))
    if len(parts) == 1:
        return parts[0]
    outs = [np.concatenate([p[0][k] for p in parts]) for k in range(len(out_dtypes))]
    if all(p[1] is None for p in parts):
        return outs, None
    ok = np.concatenate([p[1] if p[1] is not None else np.ones(len(p[0][0]) if p[0] else 0, bool) for p in parts])
    return outs, ok


def kernel_gather(index, src, pool=None, out=None):
    """``dst[k] = src[index[k]]`` for every source column."""
    n = len(index)
    out = out if out is not None else [np.empty(n, dtype=s.dtype) for s in src]

    def work(lo, hi):
        for s, o in zip(src, out):
            np.take(s, index[lo:hi], out=o[lo:hi], mode="raise")

    try:
        _chunked(pool, n, work)
    except IndexError as e:
        raise KernelError(f"gather index out of range: {e}") from None
    return out


def kernel_gather_reduce(sr, index_pair, src_pair, pool=None, out=None):
    """``dst[k] = srcA[iA[k]] ⊗ srcB[iB[k]]``."""
    ia, ib = index_pair
    a, b = src_pair
    n = len(ia)
    out = out if out is not None else sr.zeros(n)

    def work(lo, hi):
        out[lo:hi] = sr.otimes(a[ia[lo:hi]], b[ib[lo:hi]])

    _chunked(pool, n, work)
    return out


def kernel_build(table, keys, n, pool=None, retry_table=None) -> hashindex.HashIndex:
    idx = hashindex.build(table, keys, n, pool, retry_table)
    # the index outlives this iteration's registers when it is static
    idx.keys = [np.array(k, copy=True) for k in idx.keys]
    return idx


def kernel_count(idx, probe_keys, n, pool=None):
    return hashindex.count(idx, probe_keys, n, pool)


def kernel_scan(src):
    """Exclusive prefix sum; returns ``(offsets, total)``."""
    src = np.asarray(src, dtype=np.int64)
    out = np.zeros(len(src), dtype=np.int64)
    if len(src) > 1:
        np.cumsum(src[:-1], out=out[1:])
    total = int(out[-1] + src[-1]) if len(src) else 0
    return out, total


def kernel_join(idx, probe_keys, n, counts, offsets, total, pool=None):
    return hashindex.join(idx, probe_keys, n, counts, offsets, total, pool)


def kernel_sort(cols, tags):
    n = len(tags)
    order = lex_order(order_keys(cols), n) if cols else np.arange(n)
    return [c[order] for c in cols], tags[order]


def kernel_unique(sr, cols, tags, debug=False):
    """Fold adjacent duplicate tuples with ⊕.  Returns ``(cols, tags, count)``."""
    n = len(tags)
    keys = order_keys(cols)
    if debug and not is_sorted(keys, n):
        raise KernelError("unique on unsorted input")
    if n == 0:
        return cols, tags, 0
    starts = np.flatnonzero(row_change(keys, n))
    if len(starts) == n:
        return cols, tags, n
    return [c[starts] for c in cols], sr.reduce(tags, starts), len(starts)


def kernel_merge(sr, a_cols, a_tags, b_cols, b_tags, combine=True, debug=False):
    """Merge two sorted tables (ties: ``a`` first); with ``combine`` equal tuples fold with ⊕."""
    if debug:
        for cols, tags in ((a_cols, a_tags), (b_cols, b_tags)):
            if not is_sorted(order_keys(cols), len(tags)):
                raise KernelError("merge on unsorted input")
    cols = [np.concatenate([x, y]) for x, y in zip(a_cols, b_cols)]
    tags = np.concatenate([a_tags, b_tags])
    cols, tags = kernel_sort(cols, tags)
    if combine:
        cols, tags, _ = kernel_unique(sr, cols, tags)
    return cols, tags


def kernel_compact(mask, src, tags=None, pool=None):
    keep = np.flatnonzero(np.asarray(mask, dtype=bool))
    out = [s[keep] for s in src]
    return (out, tags[keep]) if tags is not None else out


def kernel_diff(sr, a_cols, a_tags, b_cols, b_tags):
    """Rows of ``a`` that are new relative to the duplicate-free ``b``, or whose tag
    would still change ``b``'s tag; zero tags are dropped."""
    na, nb = len(a_tags), len(b_tags)
    hit = match_sorted(order_keys(b_cols), nb, order_keys(a_cols), na)
    keep = hit < 0
    m = np.flatnonzero(~keep)
    if len(m):
        keep[m] = ~sr.saturated(b_tags[hit[m]], a_tags[m])
    keep &= ~sr.is_zero(a_tags)
    sel = np.flatnonzero(keep)
    return [c[sel] for c in a_cols], a_tags[sel]
