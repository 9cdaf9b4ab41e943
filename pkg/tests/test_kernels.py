import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from apmdl.provenance import make_semiring
from apmdl.runtime import kernels
from apmdl.runtime.bytecode import compile_lambda
from apmdl.runtime.hashindex import capacity_for, SLOT_DTYPE
from apmdl.runtime.parallel import WorkerPool
from apmdl.ram import BinOp, Col, Lambda

MM = make_semiring("max-min-prob")


def p_tags(values):
    t = MM.zeros(len(values))
    t["p"] = values
    return t


def cols(*cs):
    return [np.array(c, dtype=np.int64) for c in cs]


def test_scan_exclusive_prefix_sum():
    offsets, total = kernels.kernel_scan([3, 1, 2])
    assert offsets.tolist() == [0, 3, 4]
    assert total == 6


def test_scan_empty():
    offsets, total = kernels.kernel_scan([])
    assert offsets.tolist() == [] and total == 0


def test_gather():
    src = [np.array(["a", "b", "c"])]
    out = kernels.kernel_gather(np.array([2, 0]), src)
    assert out[0].tolist() == ["c", "a"]


def test_gather_empty_index():
    out = kernels.kernel_gather(np.zeros(0, dtype=np.int64), cols([1, 2, 3]))
    assert len(out[0]) == 0


def test_gather_out_of_range_is_hard_error():
    with pytest.raises(kernels.KernelError):
        kernels.kernel_gather(np.array([5]), cols([1, 2]))


def test_gather_reduce_uses_otimes():
    a, b = p_tags([0.9]), p_tags([0.5])
    out = kernels.kernel_gather_reduce(MM, (np.array([0]), np.array([0])), (a, b))
    assert out["p"].tolist() == [0.5]


def test_eval_permutation_path():
    bc = compile_lambda(Lambda.permutation(2, [1, 0]))
    assert bc.column_map == [1, 0]
    out, ok = kernels.kernel_eval(bc, cols([1, 2], [3, 4]), 2, [np.dtype(np.int64)] * 2)
    assert list(zip(*[o.tolist() for o in out])) == [(3, 1), (4, 2)]
    assert ok is None


def test_sort_is_stable_on_ties():
    c, t = kernels.kernel_sort(cols([2, 1, 2, 1]), p_tags([0.1, 0.2, 0.3, 0.4]))
    assert c[0].tolist() == [1, 1, 2, 2]
    assert t["p"].tolist() == [0.2, 0.4, 0.1, 0.3]


def test_unique_max_example():
    c, t, n = kernels.kernel_unique(MM, cols([1, 1, 2], [2, 2, 3]), p_tags([0.3, 0.5, 0.1]))
    assert n == 2
    assert list(zip(c[0].tolist(), c[1].tolist())) == [(1, 2), (2, 3)]
    assert t["p"].tolist() == [0.5, 0.1]


def test_unique_rejects_unsorted_in_debug():
    with pytest.raises(kernels.KernelError):
        kernels.kernel_unique(MM, cols([2, 1]), p_tags([0.1, 0.2]), debug=True)


def test_merge_example():
    c, t = kernels.kernel_merge(MM, cols([1], [1]), p_tags([1.0]), cols([0, 2], [9, 2]), p_tags([1.0, 1.0]))
    assert list(zip(c[0].tolist(), c[1].tolist())) == [(0, 9), (1, 1), (2, 2)]


def test_merge_rejects_unsorted_in_debug():
    with pytest.raises(kernels.KernelError):
        kernels.kernel_merge(MM, cols([2, 1]), p_tags([1, 1]), cols([0]), p_tags([1]), debug=True)


def test_compact_example():
    out = kernels.kernel_compact([1, 0, 1], [np.array(["a", "b", "c"])])
    assert out[0].tolist() == ["a", "c"]


def test_compact_keeps_tags_aligned():
    out, tags = kernels.kernel_compact([0, 1, 1], cols([7, 8, 9]), p_tags([0.1, 0.2, 0.3]))
    assert out[0].tolist() == [8, 9] and tags["p"].tolist() == [0.2, 0.3]


def test_diff_drops_known_and_saturated_rows():
    base_c, base_t = cols([1, 2]), p_tags([0.8, 0.3])
    a_c, a_t = cols([1, 2, 3]), p_tags([0.5, 0.6, 0.4])
    c, t = kernels.kernel_diff(MM, a_c, a_t, base_c, base_t)
    # (1) is saturated by 0.8; (2) improves; (3) is new
    assert c[0].tolist() == [2, 3]
    assert t["p"].tolist() == [0.6, 0.4]


def _join_pairs(left, right, w, pool=None):
    lk, rk = left[:w], right[:w]
    n_l, n_r = len(left[0]), len(right[0])
    table = np.zeros(capacity_for(n_l, 2.0), dtype=SLOT_DTYPE)
    idx = kernels.kernel_build(table, lk, n_l, pool)
    counts = kernels.kernel_count(idx, rk, n_r, pool)
    offsets, total = kernels.kernel_scan(counts)
    il, ir = kernels.kernel_join(idx, rk, n_r, counts, offsets, total, pool)
    return il, ir, total


def test_build_probe_one_match():
    edge = cols([1, 2], [2, 3])  # keys {1, 2}
    path2 = cols([2], [0])  # second column {2}, permuted to the front
    il, ir, total = _join_pairs(edge, path2, 1)
    assert total == 1
    assert (il.tolist(), ir.tolist()) == ([1], [0])


def test_absent_probe_key_counts_zero():
    il, ir, total = _join_pairs(cols([1, 2]), cols([9]), 1)
    assert total == 0 and len(il) == 0


def test_product_of_two_and_three():
    il, ir, total = _join_pairs(cols([1, 2]), cols([7, 8, 9]), 0)
    assert total == 6
    assert sorted(zip(il.tolist(), ir.tolist())) == [(i, j) for i in range(2) for j in range(3)]


def test_empty_build_side():
    il, ir, total = _join_pairs(cols([]), cols([1, 2]), 1)
    assert total == 0


rows = st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), max_size=60)


@given(rows, rows, st.integers(0, 2))
def test_join_matches_nested_loop(left, right, w):
    L = cols([r[0] for r in left], [r[1] for r in left])
    R = cols([r[0] for r in right], [r[1] for r in right])
    il, ir, total = _join_pairs(L, R, w)
    got = sorted(zip(il.tolist(), ir.tolist()))
    want = sorted((i, j) for i, a in enumerate(left) for j, b in enumerate(right) if a[:w] == b[:w])
    assert got == want
    assert total == len(want)
    # probe-row then build-row order
    assert list(zip(ir.tolist(), il.tolist())) == sorted(zip(ir.tolist(), il.tolist()))


def test_join_large_random_with_threads():
    rng = np.random.default_rng(3)
    L = cols(rng.integers(0, 300, 1000), rng.integers(0, 5, 1000))
    R = cols(rng.integers(0, 300, 1000), rng.integers(0, 5, 1000))
    base = _join_pairs(L, R, 1)
    with WorkerPool(4, min_chunk=64) as pool:
        par = _join_pairs(L, R, 1, pool)
    assert base[2] == par[2]
    assert np.array_equal(base[0], par[0]) and np.array_equal(base[1], par[1])
    from collections import Counter
    cl, cr = Counter(L[0].tolist()), Counter(R[0].tolist())
    assert base[2] == sum(cl[k] * cr[k] for k in cr)


def test_eval_chunked_matches_single():
    fn = Lambda(2, (BinOp("+", Col(0), Col(1)),))
    bc = compile_lambda(fn)
    x = cols(np.arange(50000), np.arange(50000))
    one, _ = kernels.kernel_eval(bc, x, 50000, [np.dtype(np.int64)])
    with WorkerPool(4, min_chunk=1000) as pool:
        par, _ = kernels.kernel_eval(bc, x, 50000, [np.dtype(np.int64)], pool)
    assert np.array_equal(one[0], par[0])
