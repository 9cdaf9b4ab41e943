import json
import random

import numpy as np
import pytest

from apmdl import engine
from apmdl.cli import SG_PROGRAM, TC_PROGRAM
from apmdl.db import Database, dump_relation
from apmdl.runtime.interpreter import ExecConfig, ExecError, FixpointError, execute
from oracles import reachability, same_generation


def tc(edges, **kw):
    return engine.run(TC_PROGRAM, [("edge", e) for e in edges], exec_cfg=ExecConfig(**kw))


def tuples(res, rel):
    return {t for t, _ in dump_relation(res.db, rel)}


def test_chain_reaches_fixpoint_in_three_iterations():
    res = tc([(1, 2), (2, 3)])
    assert res.stats.iterations == [3]
    assert tuples(res, "path") == reachability([(1, 2), (2, 3)])


def test_empty_edb_one_iteration():
    res = tc([])
    assert res.stats.total_iterations == 1
    assert dump_relation(res.db, "path") == []


def test_self_loop_terminates():
    res = tc([(1, 1)])
    assert tuples(res, "path") == {(1, 1)}
    assert res.stats.total_iterations <= 3


def test_size_only_termination_matches():
    edges = [(0, 1), (1, 2), (2, 0), (2, 3)]
    a = tc(edges)
    b = tc(edges, termination="size-only")
    assert tuples(a, "path") == tuples(b, "path") == reachability(edges)


def test_max_iterations_raises():
    with pytest.raises(FixpointError):
        tc([(k, k + 1) for k in range(20)], max_iterations=5)


@pytest.mark.parametrize("bad", [{"termination": "never"}, {"occupancy": 0.5}, {"max_iterations": 0},
                                 {"threads": 0}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ExecConfig(**bad)


@pytest.mark.parametrize("seed", range(5))
def test_random_graphs_match_oracles(seed):
    rng = random.Random(seed)
    edges = sorted({(rng.randrange(12), rng.randrange(12)) for _ in range(18)})
    assert tuples(tc(edges), "path") == reachability(edges)
    sg = engine.run(SG_PROGRAM, [("edge", e) for e in edges])
    assert tuples(sg, "sg") == same_generation(edges)


def test_threads_parity_and_determinism():
    rng = np.random.default_rng(1)
    edges = sorted({(int(a), int(b)) for a, b in rng.integers(0, 400, (600, 2))})
    one = tc(edges, threads=1)
    many = tc(edges, threads=4)
    again = tc(edges, threads=4)
    d1, d2, d3 = (dump_relation(r.db, "path") for r in (one, many, again))
    assert d1 == d2 == d3


def test_toggles_do_not_change_results():
    edges = [(0, 1), (1, 2), (2, 3), (3, 1), (4, 0)]
    base = tuples(tc(edges), "path")
    for kw in ({"arena": False}, {"reuse": False}, {"arena": False, "reuse": False}, {"occupancy": 1.0}):
        assert tuples(tc(edges, **kw), "path") == base


def test_static_build_skipped_after_first_iteration():
    res = tc([(k, k + 1) for k in range(6)])
    assert res.stats.static_skips > 0
    assert res.stats.kernel_calls["build"] < res.stats.total_iterations * 2


def test_steady_state_allocation():
    res = tc([(k, k + 1) for k in range(30)])
    assert res.stats.fresh_per_iteration[2:] == [0] * (len(res.stats.fresh_per_iteration) - 2)


def test_observer_sees_every_iteration():
    seen = []
    tc([(1, 2), (2, 3)], observer=lambda s, k, db: seen.append((s, k)))
    assert seen == [(0, 1), (0, 2), (0, 3)]


def test_division_by_zero_drops_row_and_counts():
    prog = """
type n(i64, i64)
rel q(x / y) :- n(x, y).
query q
"""
    res = engine.run(prog, [("n", (6, 3)), ("n", (1, 0))])
    assert tuples(res, "q") == {(2,)}
    assert res.stats.div_by_zero == 1


def test_schema_mismatch_is_reported():
    compiled = engine.compile_text(TC_PROGRAM)
    db = Database({"edge": ("f64", "f64")})
    with pytest.raises(ExecError):
        execute(compiled.apm, db)


def test_stats_dict_is_json_ready():
    d = tc([(1, 2)]).stats.to_dict()
    json.dumps(d)
    assert {"iterations", "kernel_ns", "fresh_allocations", "reuse_hits", "total_iterations"} <= set(d)
