import random

import pytest

from apmdl import apm, compiler, engine, ram
from apmdl.apm import Build, Load
from apmdl.cli import SG_PROGRAM, TC_PROGRAM
from apmdl.compiler import CompileOptions, apply_batching, compile_expr, delta_expr, zero_expr
from apmdl.db import dump_relation
from apmdl.ram import BinOp, Col, Const, Join, Lambda, Product, Project, RamRule, Relation, Select, Union_
from apmdl.runtime.interpreter import ExecConfig
from oracles import naive_steps

SCHEMAS = {"edge": ("i64", "i64"), "path": ("i64", "i64"), "a": ("i64",), "b": ("i64",), "r": ("i64", "i64")}


def ops(instrs):
    return [apm.op_name(i) for i in instrs]


def run_rules(rules, facts, provenance="unit", **kw):
    rp = ram.stratify(rules, SCHEMAS)
    return engine.run_compiled(engine.compile_ram(rp, **kw), facts, provenance)


def rows(res, rel):
    return [t for t, _ in dump_relation(res.db, rel)]


# -- expression blocks ---------------------------------------------------------------


def test_relation_block():
    instrs, regs = compile_expr(Relation("edge"), SCHEMAS)
    assert ops(instrs) == ["alloc", "load"]
    assert [r.kind for r in regs] == ["i64", "i64", "tag"]


def test_project_block():
    instrs, regs = compile_expr(Project(Lambda.permutation(2, [1, 0]), Relation("path")), SCHEMAS)
    assert ops(instrs)[2:] == ["alloc", "eval", "copy"]
    load, ev, cp = instrs[1], instrs[3], instrs[4]
    assert str(ev.fn) == "λ(i,j).(j,i)"
    # the tag column is copied through untouched
    assert cp.srcs == ((load.dst[-1],),) and cp.dst == (regs[-1],)


def test_join_block_instruction_order():
    e = Join(1, Relation("edge"), Project(Lambda.permutation(2, [1, 0]), Relation("path")))
    instrs, _ = compile_expr(e, SCHEMAS)
    assert ops(instrs)[-10:] == ["alloc", "build", "alloc", "count", "scan", "alloc", "join",
                                 "gather", "gather", "gather<⊗>"]


def test_select_lowers_to_compact():
    e = Select(Lambda(2, (BinOp("<", Col(0), Col(1)),)), Relation("edge"))
    instrs, _ = compile_expr(e, SCHEMAS)
    assert {"eval", "scan", "compact"} <= set(ops(instrs))


def test_select_true_is_identity():
    facts = [("edge", (3, 1)), ("edge", (1, 2)), ("edge", (2, 2))]
    true = Select(Lambda(2, (Const(True, "bool"),)), Relation("edge"))
    res = run_rules([RamRule("r", true)], facts)
    assert rows(res, "r") == rows(res, "edge") == [(1, 2), (2, 2), (3, 1)]


def test_product_of_two_and_three():
    facts = [("a", (1,)), ("a", (2,)), ("b", (7,)), ("b", (8,)), ("b", (9,))]
    res = run_rules([RamRule("r", Product(Relation("a"), Relation("b")))], facts)
    assert len(rows(res, "r")) == 6


def test_join_with_empty_left():
    facts = [("edge", (1, 2))]
    e = Project(Lambda.permutation(3, [0, 2]), Join(1, Relation("path"), Relation("edge")))
    res = run_rules([RamRule("r", e)], facts)
    assert rows(res, "r") == []


def test_intersect_combines_with_otimes():
    facts = [("edge", (1, 2), 0.9), ("edge", (2, 3), 0.4), ("path", (1, 2), 0.5)]
    res = run_rules([RamRule("r", ram.Intersect(Relation("edge"), Relation("path")))], facts, "max-min-prob")
    assert [(t, ro.probability) for t, ro in dump_relation(res.db, "r")] == [((1, 2), 0.5)]


# -- semi-naive split -----------------------------------------------------------------


def test_delta_of_join_has_three_variants():
    e = Join(1, Relation("path"), Relation("path"))
    d = delta_expr(e, {"path"})
    assert len(d.items) == 3
    parts = [(x.left.part, x.right.part) for x in d.items]
    assert parts == [("stable", "recent"), ("recent", "stable"), ("recent", "recent")]


def test_delta_with_edb_operand_degenerates():
    d = delta_expr(Join(1, Relation("edge"), Relation("path")), {"path"})
    assert isinstance(d, Join)  # only stable(edge) joined with recent(path) survives
    assert (d.left.part, d.right.part) == ("stable", "recent")


def test_non_recursive_rule_goes_to_once_only():
    p = engine.compile_text("type e(i64)\nrel f(x) :- e(x).").apm
    s = p.strata[-1]
    assert s.once and not s.loop and not s.recursive


def test_zero_expr_drops_local_branches():
    e = Union_(Relation("edge"), Join(1, Relation("path"), Relation("edge")))
    z = zero_expr(e, {"path"})
    assert z == compiler._Part("edge", "stable")
    assert zero_expr(Relation("path"), {"path"}) is None


def test_tc_epilogue_touches_only_path():
    p = engine.compile_text(TC_PROGRAM).apm
    rels = {i.rel for i in p.strata[0].epilogue if hasattr(i, "rel")}
    assert rels == {"path"}


def test_epilogue_merges_delta_duplicates_with_oplus():
    text = "type a(i64, i64)\ntype b(i64, i64)\nrel r(x, y) :- a(x, y) or b(x, y)."
    seen = {}

    def look(stratum, k, db):
        t = db.get("r", "recent")
        if len(t):
            seen[k] = list(zip(t.rows(), t.tags["p"].tolist()))

    engine.run(text, [("a", (1, 3), 0.2), ("b", (1, 3), 0.6)], "max-min-prob", ExecConfig(observer=look))
    assert seen == {1: [((1, 3), 0.6)]}


def test_empty_delta_empties_recent():
    last = {}

    def look(stratum, k, db):
        last["recent"] = len(db.get("path", "recent"))

    engine.run(TC_PROGRAM, [("edge", (1, 2))], exec_cfg=ExecConfig(observer=look))
    assert last["recent"] == 0


MUTUAL = """\
type edge(i64, i64)
rel even(x, x) :- edge(x, _).
rel even(x, z) :- odd(x, y), edge(y, z).
rel odd(x, z) :- even(x, y), edge(y, z).
"""


@pytest.mark.parametrize("text", [TC_PROGRAM, SG_PROGRAM, MUTUAL], ids=["tc", "sg", "mutual"])
@pytest.mark.parametrize("seed", range(4))
def test_delta_split_complete_each_iteration(text, seed):
    """After iteration k, stable and recent hold exactly the k-th naive iterate."""
    rng = random.Random(seed)
    edges = sorted({(rng.randrange(7), rng.randrange(7)) for _ in range(9)})
    compiled = engine.compile_text(text)
    rules = compiled.ram.rules
    edb = {"edge": {e: 1.0 for e in edges}}
    mismatches = []

    def look(stratum, k, db):
        want = naive_steps(rules, edb, k)
        for rel in compiled.ram.strata[stratum].relations:
            got = {t for t, _ in dump_relation(db, rel)}
            if got != set(want.get(rel, {})):
                mismatches.append((k, rel))

    iters = engine.run_compiled(compiled, [("edge", e) for e in edges], exec_cfg=ExecConfig(observer=look))
    assert iters.stats.total_iterations >= 1
    assert mismatches == []


# -- static registers ------------------------------------------------------------------


def test_tc_edge_index_is_static():
    p = engine.compile_text(TC_PROGRAM).apm
    builds = [i for i in p.strata[0].loop if isinstance(i, Build)]
    assert builds and all(b.static for b in builds)


def _local_derived(s):
    """Registers whose contents depend on a stratum-local relation."""
    out = set()
    for ins in s.loop:
        if isinstance(ins, Load):
            if ins.rel in s.relations:
                out.update(ins.dst)
        elif set(ins.reads()) & out:
            out.update(ins.writes())
    return out


SQUARE = "type e(i64,i64)\nrel p(x,y) :- e(x,y).\nrel p(x,z) :- p(x,y), p(y,z).\n"


@pytest.mark.parametrize("text", [SG_PROGRAM, MUTUAL, SQUARE])
def test_recent_indexes_are_never_static(text):
    p = engine.compile_text(text).apm
    for s in p.strata:
        local = _local_derived(s)
        builds = [i for i in s.loop if isinstance(i, Build)]
        assert builds
        for b in builds:
            assert b.static == (not set(b.reads()) & local)


def test_static_flag_off():
    p = engine.compile_text(TC_PROGRAM, options=CompileOptions(static_regs=False)).apm
    assert not p.static_regs


def test_non_recursive_static_flag_harmless():
    text = "type e(i64, i64)\ntype f(i64, i64)\nrel g(x, z) :- e(x, y), f(y, z)."
    facts = [("e", (1, 2)), ("f", (2, 3))]
    on = engine.run(text, facts)
    off = engine.run(text, facts, options=CompileOptions(static_regs=False))
    assert rows(on, "g") == rows(off, "g") == [(1, 3)]


def test_diff_delta_same_result():
    edges = [("edge", (k, (k * 3 + 1) % 9)) for k in range(9)]
    a = engine.run(TC_PROGRAM, edges)
    b = engine.run(TC_PROGRAM, edges, options=CompileOptions(diff_delta=True))
    assert rows(a, "path") == rows(b, "path")


# -- batching ---------------------------------------------------------------------------


def test_batching_widens_joins_and_schemas():
    two_hop = Project(Lambda.permutation(3, [0, 2]), Join(1, Relation("edge"), Relation("edge")))
    rp = ram.stratify([RamRule("r", two_hop), RamRule("path", Product(Relation("a"), Relation("b")))], SCHEMAS)
    b = apply_batching(rp)
    assert b.schemas["edge"] == ("u8", "i64", "i64")
    r_expr = next(r.expr for r in b.rules if r.target == "r")
    assert r_expr.child.width == 2
    assert r_expr.fn.outputs == (Col(0), Col(1), Col(3))
    p_expr = next(r.expr for r in b.rules if r.target == "path")
    assert isinstance(p_expr, Join) and p_expr.width == 1


def test_three_single_fact_samples_share_one_table():
    res = engine.run_batch(TC_PROGRAM, [[("edge", (0, 1))], [("edge", (1, 2))], [("edge", (2, 3))]])
    t = res.db.get("edge", "stable")
    assert len(t) == 3 and sorted(t.columns[0].tolist()) == [0, 1, 2]


def test_no_joins_across_samples():
    res = engine.run_batch(TC_PROGRAM, [[("edge", (1, 2))], [("edge", (2, 3))]])
    assert rows(res, "path") == [(1, 2), (2, 3)]
    assert [t for t, _ in dump_relation(res.db, "path", sample=0)] == [(1, 2)]


def test_batch_of_one_equals_unbatched():
    facts = [("edge", (1, 2), 0.5), ("edge", (2, 3), 0.7), ("edge", (3, 1), 0.9)]
    single = engine.run(TC_PROGRAM, facts, "diff-add-mult-prob")
    batch = engine.run_batch(TC_PROGRAM, [facts], "diff-add-mult-prob")
    assert dump_relation(single.db, "path") == dump_relation(batch.db, "path", sample=0)
