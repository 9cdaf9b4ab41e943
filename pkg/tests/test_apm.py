import os

import pytest

from apmdl import apm, engine
from apmdl._lexer import SyntaxErr
from apmdl.apm import Alloc, Eval, Fixed, Load, Reg, Scan, Size, Store
from apmdl.cli import SG_PROGRAM, TC_PROGRAM
from apmdl.ram import Lambda
from test_acceptance import PATHFINDER

CORPUS = os.path.join(os.path.dirname(__file__), "corpus")


def corpus_programs():
    out = []
    for name in sorted(os.listdir(CORPUS)):
        with open(os.path.join(CORPUS, name, "program.dl"), encoding="utf-8") as fh:
            out.append(pytest.param(fh.read(), id=name))
    return out + [pytest.param(TC_PROGRAM, id="tc-builtin"), pytest.param(SG_PROGRAM, id="sg-builtin"),
                  pytest.param(PATHFINDER, id="pathfinder")]


def tc_apm():
    return engine.compile_text(TC_PROGRAM).apm


def test_compiled_join_block_is_valid_ssa():
    assert apm.validate_ssa(tc_apm()) == []


R = [Reg(i, "i64") for i in range(10)]


def test_double_write():
    prog = [Alloc(0, (R[1],), Fixed(2)), Load("e", "stable", (R[1],)), Load("e", "stable", (R[1],))]
    errs = apm.validate_ssa(prog)
    assert len(errs) == 1 and errs[0][0] == 2 and "written twice" in errs[0][1]


def test_unallocated_read():
    prog = [Alloc(0, (R[1],), Fixed(2)), Eval((R[1],), Lambda.identity(1), (R[9],))]
    errs = apm.validate_ssa(prog)
    assert errs[0][0] == 1 and "unallocated register r9" in errs[0][1]


def test_read_before_write():
    prog = [Alloc(0, (R[1], R[2]), Fixed(1)), Eval((R[2],), Lambda.identity(1), (R[1],))]
    assert "before it is written" in apm.validate_ssa(prog)[0][1]


def test_alloc_size_reading_unwritten_register():
    prog = [Alloc(0, (R[1],), Fixed(1)), Alloc(1, (R[2],), Size(R[1]))]
    assert apm.validate_ssa(prog)


def test_double_alloc():
    prog = [Alloc(0, (R[1],), Fixed(1)), Alloc(1, (R[1],), Fixed(1))]
    assert "two allocs" in apm.validate_ssa(prog)[0][1]


def test_check_ssa_raises():
    with pytest.raises(apm.SsaError):
        apm.check_ssa([Store("e", "delta", (R[3],))])


def test_lifetimes():
    idx = Reg(7, "idx")
    prog = [
        Alloc(0, (R[1],), Fixed(3)),                      # 0
        Alloc(1, (idx,), Fixed(3)),                       # 1
        Alloc(2, (R[2],), Fixed(3)),                      # 2
        Load("e", "stable", (R[1],)),                     # 3
        Scan(idx, R[1]),                                  # 4
        Eval((R[2],), Lambda.identity(1), (R[1],)),       # 5
        Store("e", "delta", (R[2],)),                     # 6
        Store("f", "delta", (R[1],)),                     # 7
    ]
    lt = apm.register_lifetimes(prog)
    assert (lt[R[1]].start, lt[R[1]].end) == (3, 7)
    assert lt[idx] == apm.Lifetime(4, 4, dead=True)
    assert not lt[R[2]].dead


def test_static_hash_lives_whole_program():
    p = tc_apm()
    n = len(p.instructions())
    lt = apm.register_lifetimes(p)
    statics = [r for r in p.static_regs if r.kind == "hash"]
    assert statics
    for r in statics:
        assert (lt[r].start, lt[r].end) == (0, n - 1)


def test_lifetimes_require_valid_program():
    with pytest.raises(apm.SsaError):
        apm.register_lifetimes([Load("e", "stable", (R[1],))])


def test_no_control_flow_instructions():
    names = {apm.op_name(i) for i in tc_apm().instructions()}
    assert not names & {"jump", "branch", "loop", "if"}


@pytest.mark.parametrize("text", corpus_programs())
@pytest.mark.parametrize("batched", [False, True])
def test_print_parse_round_trip(text, batched):
    p = engine.compile_text(text, batched=batched).apm
    printed = apm.print_program(p)
    again = apm.parse_program(printed)
    assert apm.print_program(again) == printed
    assert again.strata == p.strata
    assert apm.validate_ssa(p) == []


def test_parse_rejects_unknown_instruction():
    with pytest.raises(SyntaxErr, match="unknown instruction"):
        apm.parse_program("stratum 0 [a]\n.loop\n  alloc#0 [r0:i64] 1\n  [r0] <- frobnicate()\n")


def test_parse_rejects_register_without_alloc():
    with pytest.raises(SyntaxErr, match="before its alloc"):
        apm.parse_program("stratum 0 [a]\n.loop\n  [r0] <- load<a.stable>()\n")


def test_empty_program_prints_empty():
    assert apm.print_program(engine.compile_text("").apm) == ""
