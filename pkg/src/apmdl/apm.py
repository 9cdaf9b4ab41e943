"""Straight-line vector-register IR.

Each stratum compiles to three instruction lists: ``once`` runs only in the
first fixpoint iteration (rules that read no stratum-local relation), ``loop``
runs every iteration, and ``epilogue`` settles the partitions at the end of
every iteration.  Registers are in SSA form and every register is covered by
exactly one ``alloc``.

Text form, one instruction per line::

    alloc#3 [r4:i64, r5:i64, r6:tag] size(r1)
    [r4, r5] <- eval<λ(i,j).(j,i)>([r1, r2])
    static r9 <- build([r7])
    [r12, r13] <- join<1>([r4], [r7], r9, r10, r11)
    store<path.delta>([r14, r15, r16])
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

from ._lexer import Cursor, SyntaxErr, tokenize
from .ram import Lambda, parse_lambda_at

REG_KINDS = ("i64", "f64", "sym", "u8", "tag", "idx", "mask", "hash")
VALUE_KINDS = ("i64", "f64", "sym", "u8")


@dataclass(frozen=True)
class Reg:
    id: int
    kind: str

    def __str__(self):
        return f"r{self.id}"


# -- allocation size expressions ------------------------------------------------------


@dataclass(frozen=True)
class Size:
    reg: Reg

    def __str__(self):
        return f"size({self.reg})"


@dataclass(frozen=True)
class RelSize:
    rel: str
    part: str

    def __str__(self):
        return f"size({self.rel}.{self.part})"


@dataclass(frozen=True)
class Last:
    reg: Reg

    def __str__(self):
        return f"last({self.reg})"


@dataclass(frozen=True)
class Occ:
    """``inner * O`` where O is the hash occupancy factor."""

    inner: "SizeExpr"

    def __str__(self):
        return f"{self.inner}*O"


@dataclass(frozen=True)
class Sum:
    terms: tuple

    def __str__(self):
        return "+".join(str(t) for t in self.terms)


@dataclass(frozen=True)
class Fixed:
    n: int

    def __str__(self):
        return str(self.n)


SizeExpr = Union[Size, RelSize, Last, Occ, Sum, Fixed]


def size_regs(s) -> list[Reg]:
    if isinstance(s, (Size, Last)):
        return [s.reg]
    if isinstance(s, Occ):
        return size_regs(s.inner)
    if isinstance(s, Sum):
        return [r for t in s.terms for r in size_regs(t)]
    return []


# -- instructions --------------------------------------------------------------------


def _regs(rs) -> str:
    return "[" + ", ".join(str(r) for r in rs) + "]"


@dataclass(frozen=True)
class Alloc:
    site: int
    regs: tuple
    size: SizeExpr
    static: bool = False

    def reads(self):
        return tuple(size_regs(self.size))

    def writes(self):
        return ()

    def fmt(self):
        decl = ", ".join(f"{r}:{r.kind}" for r in self.regs)
        return f"{'static ' if self.static else ''}alloc#{self.site} [{decl}] {self.size}"


@dataclass(frozen=True)
class Load:
    rel: str
    part: str
    dst: tuple

    def reads(self):
        return ()

    def writes(self):
        return self.dst

    def fmt(self):
        return f"{_regs(self.dst)} <- load<{self.rel}.{self.part}>()"


@dataclass(frozen=True)
class Store:
    rel: str
    part: str
    src: tuple  # empty: clear the partition

    def reads(self):
        return self.src

    def writes(self):
        return ()

    def fmt(self):
        return f"store<{self.rel}.{self.part}>({_regs(self.src) if self.src else ''})"


@dataclass(frozen=True)
class Eval:
    dst: tuple
    fn: Lambda
    src: tuple
    ok: Reg | None = None  # rows whose arithmetic is defined (division)

    def reads(self):
        return self.src

    def writes(self):
        return self.dst + ((self.ok,) if self.ok else ())

    def fmt(self):
        ok = f", {self.ok}" if self.ok else ""
        return f"{_regs(self.dst)}{ok} <- eval<{self.fn}>({_regs(self.src)})"


@dataclass(frozen=True)
class Gather:
    dst: tuple
    index: Reg
    src: tuple

    def reads(self):
        return (self.index,) + self.src

    def writes(self):
        return self.dst

    def fmt(self):
        return f"{_regs(self.dst)} <- gather({self.index}, {_regs(self.src)})"


@dataclass(frozen=True)
class GatherReduce:
    dst: Reg
    op: str
    index: tuple
    src: tuple

    def reads(self):
        return self.index + self.src

    def writes(self):
        return (self.dst,)

    def fmt(self):
        return f"{self.dst} <- gather<{self.op}>({_regs(self.index)}, {_regs(self.src)})"


@dataclass(frozen=True)
class Build:
    dst: Reg
    keys: tuple
    static: bool = False
    rows: Reg | None = None  # row source for a keyless (cross product) build

    def reads(self):
        return self.keys + ((self.rows,) if self.rows is not None else ())

    def writes(self):
        return (self.dst,)

    def fmt(self):
        rows = f", {self.rows}" if self.rows is not None else ""
        return f"{'static ' if self.static else ''}{self.dst} <- build({_regs(self.keys)}{rows})"


@dataclass(frozen=True)
class Count:
    dst: Reg
    probe: tuple
    index: Reg
    build: tuple

    def reads(self):
        return self.probe + (self.index,) + self.build

    def writes(self):
        return (self.dst,)

    def fmt(self):
        return f"{self.dst} <- count({_regs(self.probe)}, {self.index}, {_regs(self.build)})"


@dataclass(frozen=True)
class Scan:
    dst: Reg
    src: Reg

    def reads(self):
        return (self.src,)

    def writes(self):
        return (self.dst,)

    def fmt(self):
        return f"{self.dst} <- scan({self.src})"


@dataclass(frozen=True)
class JoinIdx:
    """Index pair of matching rows: ``i_l`` into the build side, ``i_r`` into the probe side."""

    width: int
    dst: tuple  # (i_l, i_r)
    probe: tuple
    build: tuple
    index: Reg
    counts: Reg
    offsets: Reg

    def reads(self):
        return self.probe + self.build + (self.index, self.counts, self.offsets)

    def writes(self):
        return self.dst

    def fmt(self):
        return (f"{_regs(self.dst)} <- join<{self.width}>({_regs(self.probe)}, {_regs(self.build)}, "
                f"{self.index}, {self.counts}, {self.offsets})")


@dataclass(frozen=True)
class Copy:
    """Concatenate one or more register packs into ``dst`` (one source: plain copy)."""

    dst: tuple
    srcs: tuple  # tuple of packs

    def reads(self):
        return tuple(r for s in self.srcs for r in s)

    def writes(self):
        return self.dst

    def fmt(self):
        return f"{_regs(self.dst)} <- copy({', '.join(_regs(s) for s in self.srcs)})"


@dataclass(frozen=True)
class Sort:
    dst: tuple
    src: tuple

    def reads(self):
        return self.src

    def writes(self):
        return self.dst

    def fmt(self):
        return f"{_regs(self.dst)} <- sort({_regs(self.src)})"


@dataclass(frozen=True)
class Unique:
    dst: tuple
    count: Reg
    op: str
    src: tuple

    def reads(self):
        return self.src

    def writes(self):
        return self.dst + (self.count,)

    def fmt(self):
        return f"{_regs(self.dst)}, {self.count} <- unique<{self.op}>({_regs(self.src)})"


@dataclass(frozen=True)
class Merge:
    dst: tuple
    op: str
    a: tuple
    b: tuple

    def reads(self):
        return self.a + self.b

    def writes(self):
        return self.dst

    def fmt(self):
        op = f"<{self.op}>" if self.op else ""
        return f"{_regs(self.dst)} <- merge{op}({_regs(self.a)}, {_regs(self.b)})"


@dataclass(frozen=True)
class Compact:
    dst: tuple
    mask: Reg
    src: tuple

    def reads(self):
        return (self.mask,) + self.src

    def writes(self):
        return self.dst

    def fmt(self):
        return f"{_regs(self.dst)} <- compact({self.mask}, {_regs(self.src)})"


@dataclass(frozen=True)
class Diff:
    """Rows of sorted ``a`` that are absent from sorted ``b`` or improve its tag."""

    dst: tuple
    a: tuple
    b: tuple

    def reads(self):
        return self.a + self.b

    def writes(self):
        return self.dst

    def fmt(self):
        return f"{_regs(self.dst)} <- diff({_regs(self.a)}, {_regs(self.b)})"


Instr = Union[Alloc, Load, Store, Eval, Gather, GatherReduce, Build, Count, Scan, JoinIdx, Copy, Sort,
              Unique, Merge, Compact, Diff]

OP_NAMES = {
    Alloc: "alloc", Load: "load", Store: "store", Eval: "eval", Gather: "gather", GatherReduce: "gather",
    Build: "build", Count: "count", Scan: "scan", JoinIdx: "join", Copy: "copy", Sort: "sort",
    Unique: "unique", Merge: "merge", Compact: "compact", Diff: "diff",
}


def op_name(ins) -> str:
    if isinstance(ins, GatherReduce):
        return f"gather<{ins.op}>"
    return OP_NAMES[type(ins)]


SECTIONS = ("once", "loop", "epilogue")


@dataclass
class ApmStratum:
    relations: list
    once: list = field(default_factory=list)
    loop: list = field(default_factory=list)
    epilogue: list = field(default_factory=list)
    recursive: bool = False

    def section(self, name):
        return getattr(self, name)

    def instructions(self):
        return self.once + self.loop + self.epilogue


@dataclass
class ApmProgram:
    strata: list
    schemas: dict = field(default_factory=dict)
    batched: bool = False

    def instructions(self):
        return [i for s in self.strata for i in s.instructions()]

    @property
    def static_regs(self) -> set:
        out = set()
        for ins in self.instructions():
            if isinstance(ins, Alloc) and ins.static:
                out.update(ins.regs)
        return out


# -- printing ------------------------------------------------------------------------


def print_program(p: ApmProgram) -> str:
    out = []
    for k, s in enumerate(p.strata):
        rec = " recursive" if s.recursive else ""
        out.append(f"stratum {k} [{', '.join(s.relations)}]{rec}")
        for sec in SECTIONS:
            body = s.section(sec)
            if body:
                out.append(f".{sec}")
                out.extend("  " + ins.fmt() for ins in body)
    return "\n".join(out) + ("\n" if out else "")


# -- parsing -------------------------------------------------------------------------


class _ApmParser:
    def __init__(self, text):
        self.text = text
        self.regs: dict[int, Reg] = {}

    def reg(self, c: Cursor) -> Reg:
        t = c.expect_kind("NAME")
        if not (t.text.startswith("r") and t.text[1:].isdigit()):
            c.error(f"expected register, found {t.text!r}", t)
        i = int(t.text[1:])
        if i not in self.regs:
            c.error(f"register {t.text} used before its alloc", t)
        return self.regs[i]

    def reglist(self, c: Cursor) -> tuple:
        c.expect("[")
        out = []
        while not c.at("]"):
            out.append(self.reg(c))
            if not c.accept(","):
                break
        c.expect("]")
        return tuple(out)

    def operand(self, c):
        return self.reglist(c) if c.at("[") else self.reg(c)

    def size(self, c: Cursor):
        terms = [self.size_term(c)]
        while c.accept("+"):
            terms.append(self.size_term(c))
        return terms[0] if len(terms) == 1 else Sum(tuple(terms))

    def size_term(self, c: Cursor):
        if c.cur.kind == "NUM":
            base = Fixed(int(c.advance().text))
        else:
            name = c.expect_kind("NAME").text
            c.expect("(")
            if name == "size" and c.cur.kind == "NAME" and c.peek().text == ".":
                rel = c.advance().text
                c.expect(".")
                part = c.expect_kind("NAME").text
                base = RelSize(rel, part)
            elif name == "size":
                base = Size(self.reg(c))
            elif name == "last":
                base = Last(self.reg(c))
            else:
                c.error(f"unknown size form {name!r}")
            c.expect(")")
        if c.accept("*"):
            c.expect("O")
            return Occ(base)
        return base

    def alloc(self, c: Cursor, static):
        t = c.expect_kind("NAME")
        site = int(t.text.split("#")[1]) if "#" in t.text else -1
        c.expect("[")
        regs = []
        while not c.at("]"):
            rt = c.expect_kind("NAME")
            c.expect(":")
            kind = c.expect_kind("NAME").text
            if kind not in REG_KINDS:
                c.error(f"unknown register kind {kind!r}")
            r = Reg(int(rt.text[1:]), kind)
            if r.id in self.regs:
                c.error(f"register {r} allocated twice", rt)
            self.regs[r.id] = r
            regs.append(r)
            if not c.accept(","):
                break
        c.expect("]")
        return Alloc(site, tuple(regs), self.size(c), static)

    def instr(self, line: str, lineno: int):
        c = Cursor(tokenize(line), f"<apm>:{lineno}")
        static = bool(c.accept("static"))
        if c.cur.kind == "NAME" and c.cur.text.startswith("alloc"):
            ins = self.alloc(c, static)
        elif c.at("store"):
            c.advance()
            c.expect("<")
            rel = c.expect_kind("NAME").text
            c.expect(".")
            part = c.expect_kind("NAME").text
            c.expect(">")
            c.expect("(")
            src = () if c.at(")") else self.reglist(c)
            c.expect(")")
            ins = Store(rel, part, src)
        else:
            dsts = [self.operand(c)]
            while c.accept(","):
                dsts.append(self.operand(c))
            c.expect("<-")
            op = c.expect_kind("NAME").text
            param = None
            if c.accept("<"):
                if op == "eval":
                    param = parse_lambda_at(c)
                elif op == "load":
                    rel = c.expect_kind("NAME").text
                    c.expect(".")
                    param = (rel, c.expect_kind("NAME").text)
                elif op == "join":
                    param = int(c.expect_kind("NUM").text)
                else:
                    param = c.advance().text
                c.expect(">")
            c.expect("(")
            args = []
            while not c.at(")"):
                args.append(self.operand(c))
                if not c.accept(","):
                    break
            c.expect(")")
            ins = self.build(c, op, param, dsts, args, static)
        if c.cur.kind != "EOF":
            c.error(f"trailing input {c.cur.text!r}")
        return ins

    def build(self, c, op, param, dsts, args, static):
        try:
            if op == "load":
                return Load(param[0], param[1], dsts[0])
            if op == "eval":
                return Eval(dsts[0], param, args[0], dsts[1] if len(dsts) > 1 else None)
            if op == "gather" and param is None:
                return Gather(dsts[0], args[0], args[1])
            if op == "gather":
                return GatherReduce(dsts[0], param, args[0], args[1])
            if op == "build":
                return Build(dsts[0], args[0], static, args[1] if len(args) > 1 else None)
            if op == "count":
                return Count(dsts[0], args[0], args[1], args[2])
            if op == "scan":
                return Scan(dsts[0], args[0])
            if op == "join":
                return JoinIdx(param, dsts[0], args[0], args[1], args[2], args[3], args[4])
            if op == "copy":
                return Copy(dsts[0], tuple(args))
            if op == "sort":
                return Sort(dsts[0], args[0])
            if op == "unique":
                return Unique(dsts[0], dsts[1], param, args[0])
            if op == "merge":
                return Merge(dsts[0], param, args[0], args[1])
            if op == "compact":
                return Compact(dsts[0], args[0], args[1])
            if op == "diff":
                return Diff(dsts[0], args[0], args[1])
        except (IndexError, TypeError):
            c.error(f"malformed {op} instruction")
        c.error(f"unknown instruction {op!r}")

    def parse(self) -> ApmProgram:
        strata = []
        sec = None
        for lineno, raw in enumerate(self.text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("stratum"):
                c = Cursor(tokenize(line), f"<apm>:{lineno}")
                c.advance()
                c.expect_kind("NUM")
                rels = []
                c.expect("[")
                while not c.at("]"):
                    rels.append(c.expect_kind("NAME").text)
                    if not c.accept(","):
                        break
                c.expect("]")
                rec = bool(c.accept("recursive"))
                strata.append(ApmStratum(rels, recursive=rec))
                sec = None
                continue
            if line.startswith("."):
                sec = line[1:]
                if sec not in SECTIONS:
                    raise SyntaxErr(f"unknown section {line!r}", lineno, 1, "<apm>")
                continue
            if not strata or sec is None:
                raise SyntaxErr("instruction outside a stratum section", lineno, 1, "<apm>")
            strata[-1].section(sec).append(self.instr(line, lineno))
        return ApmProgram(strata)


def parse_program(text: str) -> ApmProgram:
    return _ApmParser(text).parse()


# -- validation ----------------------------------------------------------------------


class SsaError(ValueError):
    def __init__(self, errors):
        self.errors = errors
        super().__init__("; ".join(f"[{i}] {m}" for i, m in errors))


def validate_ssa(p) -> list:
    """Return (instruction index, message) problems; empty when the program is valid."""
    instrs = p.instructions() if isinstance(p, (ApmProgram, ApmStratum)) else list(p)
    errors = []
    allocated: dict = {}
    written: dict = {}
    for i, ins in enumerate(instrs):
        for r in ins.reads():
            if r not in allocated:
                errors.append((i, f"{op_name(ins)} reads unallocated register {r}"))
            elif r not in written:
                errors.append((i, f"{op_name(ins)} reads {r} before it is written"))
        if isinstance(ins, Alloc):
            for r in ins.regs:
                if r in allocated:
                    errors.append((i, f"register {r} covered by two allocs ({allocated[r]} and {i})"))
                else:
                    allocated[r] = i
        for r in ins.writes():
            if r not in allocated:
                errors.append((i, f"{op_name(ins)} writes unallocated register {r}"))
            if r in written:
                errors.append((i, f"register {r} written twice (first at {written[r]})"))
            else:
                written[r] = i
    return errors


def check_ssa(p):
    errs = validate_ssa(p)
    if errs:
        raise SsaError(errs)


@dataclass(frozen=True)
class Lifetime:
    start: int
    end: int
    dead: bool = False


def register_lifetimes(p) -> dict:
    """Map register -> (first write, last read) over the flattened instruction list."""
    errs = validate_ssa(p)
    if errs:
        raise SsaError(errs)
    instrs = p.instructions() if isinstance(p, (ApmProgram, ApmStratum)) else list(p)
    static = {r for ins in instrs if isinstance(ins, Alloc) and ins.static for r in ins.regs}
    first: dict = {}
    last: dict = {}
    for i, ins in enumerate(instrs):
        for r in ins.writes():
            first.setdefault(r, i)
        for r in ins.reads():
            last[r] = i
    end = max(len(instrs) - 1, 0)
    out = {}
    for r, w in first.items():
        if r in static:
            out[r] = Lifetime(0, end, r not in last)
        elif r in last:
            out[r] = Lifetime(w, last[r])
        else:
            out[r] = Lifetime(w, w, True)
    return out
