"""Relational-algebra IR: scalar expressions, RAM expression trees, strata.

A RAM rule is ``target <- expr``.  Expressions form a tree with relations at
the leaves.  ``Join(w, l, r)`` matches the first ``w`` columns of both sides and
yields ``l`` followed by ``r[w:]``; ``Product`` is the ``w == 0`` case.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Union

import networkx as nx

from ._lexer import Cursor, SyntaxErr, tokenize

# -- scalar expressions ---------------------------------------------------------

ARITH = ("+", "-", "*", "/")
COMPARE = ("==", "!=", "<", "<=", ">", ">=")
LOGIC = ("and", "or")


@dataclass(frozen=True)
class Col:
    index: int


@dataclass(frozen=True)
class Const:
    value: object
    kind: str  # i64 | f64 | sym | bool


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Scalar"
    right: "Scalar"


@dataclass(frozen=True)
class Not:
    arg: "Scalar"


Scalar = Union[Col, Const, BinOp, Not]


class TypeErr(ValueError):
    pass


def scalar_kind(e: Scalar, kinds) -> str:
    """Result kind of ``e`` over a tuple with column ``kinds``."""
    if isinstance(e, Col):
        if not 0 <= e.index < len(kinds):
            raise TypeErr(f"column {e.index} out of range for arity {len(kinds)}")
        return kinds[e.index]
    if isinstance(e, Const):
        return e.kind
    if isinstance(e, Not):
        if scalar_kind(e.arg, kinds) != "bool":
            raise TypeErr("'not' needs a boolean")
        return "bool"
    a, b = scalar_kind(e.left, kinds), scalar_kind(e.right, kinds)
    if e.op in LOGIC:
        if a != "bool" or b != "bool":
            raise TypeErr(f"'{e.op}' needs booleans")
        return "bool"
    if e.op in COMPARE:
        if a == "sym" or b == "sym":
            if a != b:
                raise TypeErr("symbol compared with a number")
            if e.op not in ("==", "!="):
                raise TypeErr("symbols only support == and !=")
            return "bool"
        if "bool" in (a, b):
            if a != b or e.op not in ("==", "!="):
                raise TypeErr("bad boolean comparison")
            return "bool"
        return "bool"
    if a not in ("i64", "f64", "u8") or b not in ("i64", "f64", "u8"):
        raise TypeErr(f"'{e.op}' needs numbers")
    return "f64" if "f64" in (a, b) else "i64"


def scalar_cols(e: Scalar) -> set[int]:
    if isinstance(e, Col):
        return {e.index}
    if isinstance(e, Const):
        return set()
    if isinstance(e, Not):
        return scalar_cols(e.arg)
    return scalar_cols(e.left) | scalar_cols(e.right)


def has_division(e: Scalar) -> bool:
    if isinstance(e, BinOp):
        return e.op == "/" or has_division(e.left) or has_division(e.right)
    if isinstance(e, Not):
        return has_division(e.arg)
    return False


def shift_scalar(e: Scalar, k: int) -> Scalar:
    if isinstance(e, Col):
        return Col(e.index + k)
    if isinstance(e, Const):
        return e
    if isinstance(e, Not):
        return Not(shift_scalar(e.arg, k))
    return BinOp(e.op, shift_scalar(e.left, k), shift_scalar(e.right, k))


def eval_scalar(e: Scalar, row, symbols=None):
    """Reference tuple-at-a-time evaluation.  Raises ZeroDivisionError."""
    if isinstance(e, Col):
        return row[e.index]
    if isinstance(e, Const):
        if e.kind == "sym" and symbols is not None:
            return symbols(e.value)
        return e.value
    if isinstance(e, Not):
        return not eval_scalar(e.arg, row, symbols)
    a = eval_scalar(e.left, row, symbols)
    if e.op == "and":
        return bool(a) and bool(eval_scalar(e.right, row, symbols))
    if e.op == "or":
        return bool(a) or bool(eval_scalar(e.right, row, symbols))
    b = eval_scalar(e.right, row, symbols)
    op = e.op
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if b == 0:
            raise ZeroDivisionError
        if isinstance(a, int) and isinstance(b, int):
            return _trunc_div(a, b)
        return a / b
    return {"==": a == b, "!=": a != b, "<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}[op]


def _trunc_div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return q if (a >= 0) == (b >= 0) else -q


# -- lambdas --------------------------------------------------------------------

_NAMES = "ijklmnpqrs"


def param_names(n: int) -> list[str]:
    if n <= len(_NAMES):
        return list(_NAMES[:n])
    return [f"x{i}" for i in range(n)]


@dataclass(frozen=True)
class Lambda:
    """``λ(params).(outputs)`` over a tuple of ``arity`` columns."""

    arity: int
    outputs: tuple

    @classmethod
    def permutation(cls, arity: int, idx) -> "Lambda":
        return cls(arity, tuple(Col(i) for i in idx))

    @classmethod
    def identity(cls, arity: int) -> "Lambda":
        return cls.permutation(arity, range(arity))

    def is_identity(self) -> bool:
        return self.outputs == tuple(Col(i) for i in range(self.arity))

    def column_map(self):
        """Source column per output when every output is a plain column, else None."""
        if all(isinstance(o, Col) for o in self.outputs):
            return [o.index for o in self.outputs]
        return None

    def output_kinds(self, kinds) -> list[str]:
        if len(kinds) != self.arity:
            raise TypeErr(f"lambda expects arity {self.arity}, child has {len(kinds)}")
        return [scalar_kind(o, kinds) for o in self.outputs]

    def shifted(self, k: int = 1) -> "Lambda":
        """Prepend ``k`` pass-through columns (used by batching)."""
        return Lambda(self.arity + k, tuple(Col(i) for i in range(k)) + tuple(shift_scalar(o, k) for o in self.outputs))

    def __str__(self):
        names = param_names(self.arity)
        return f"λ({','.join(names)}).(" + ",".join(fmt_scalar(o, names, top=True) for o in self.outputs) + ")"


def _fmt_const(c: Const) -> str:
    if c.kind == "sym":
        return json.dumps(c.value, ensure_ascii=False)
    if c.kind == "bool":
        return "true" if c.value else "false"
    if c.kind == "f64":
        v = c.value
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return repr(float(v))
    return str(c.value)


def fmt_scalar(e: Scalar, names, top=False) -> str:
    if isinstance(e, Col):
        return names[e.index]
    if isinstance(e, Const):
        return _fmt_const(e)
    if isinstance(e, Not):
        return f"!{fmt_scalar(e.arg, names)}"
    s = f"{fmt_scalar(e.left, names)} {e.op} {fmt_scalar(e.right, names)}"
    return s if top else f"({s})"


_PREC = [("or",), ("and",), COMPARE, ("+", "-"), ("*", "/")]


class ScalarParser:
    """Precedence-climbing parser for scalar expressions over named variables."""

    def __init__(self, cur: Cursor, resolve):
        self.c = cur
        self.resolve = resolve  # name -> Scalar (or raises)

    def expr(self, level=0) -> Scalar:
        if level == len(_PREC):
            return self.unary()
        left = self.expr(level + 1)
        while self.c.at(*_PREC[level]):
            op = self.c.advance().text
            right = self.expr(level + 1)
            left = BinOp(op, left, right)
            if _PREC[level] is COMPARE:
                break
        return left

    def unary(self) -> Scalar:
        c = self.c
        if c.accept("!") or c.accept("not"):
            return Not(self.unary())
        if c.at("-"):
            c.advance()
            arg = self.unary()
            if isinstance(arg, Const) and arg.kind in ("i64", "f64"):
                return Const(-arg.value, arg.kind)
            return BinOp("-", Const(0, "i64"), arg)
        return self.atom()

    def atom(self) -> Scalar:
        c = self.c
        t = c.cur
        if t.kind == "NUM":
            c.advance()
            return parse_number(t.text)
        if t.kind == "STR":
            c.advance()
            return Const(json.loads(t.text), "sym")
        if c.accept("("):
            e = self.expr()
            c.expect(")")
            return e
        if t.kind == "NAME":
            c.advance()
            if t.text in ("true", "false"):
                return Const(t.text == "true", "bool")
            return self.resolve(t)
        c.error(f"unexpected {t.text or 'end of input'!r} in expression")


def parse_number(text: str) -> Const:
    if text in ("inf", "nan") or any(ch in text for ch in ".eE"):
        return Const(float(text), "f64")
    return Const(int(text), "i64")


def parse_lambda_at(c: Cursor) -> Lambda:
    c.expect("λ")
    c.expect("(")
    names = []
    while not c.at(")"):
        names.append(c.expect_kind("NAME").text)
        if not c.accept(","):
            break
    c.expect(")")
    c.expect(".")
    c.expect("(")
    index = {n: i for i, n in enumerate(names)}

    def resolve(tok):
        if tok.text not in index:
            c.error(f"unknown variable {tok.text!r}", tok)
        return Col(index[tok.text])

    sp = ScalarParser(c, resolve)
    outs = []
    while not c.at(")"):
        outs.append(sp.expr())
        if not c.accept(","):
            break
    c.expect(")")
    return Lambda(len(names), tuple(outs))


def parse_lambda(text: str) -> Lambda:
    c = Cursor(tokenize(text))
    lam = parse_lambda_at(c)
    if c.cur.kind != "EOF":
        c.error("trailing input after lambda")
    return lam


# -- RAM expressions ----------------------------------------------------------------


@dataclass(frozen=True)
class Relation:
    name: str


@dataclass(frozen=True)
class Project:
    fn: Lambda
    child: "RamExpr"


@dataclass(frozen=True)
class Select:
    pred: Lambda  # one boolean output
    child: "RamExpr"


@dataclass(frozen=True)
class Join:
    width: int
    left: "RamExpr"
    right: "RamExpr"


@dataclass(frozen=True)
class Union_:
    left: "RamExpr"
    right: "RamExpr"


@dataclass(frozen=True)
class Product:
    left: "RamExpr"
    right: "RamExpr"


@dataclass(frozen=True)
class Intersect:
    left: "RamExpr"
    right: "RamExpr"


RamExpr = Union[Relation, Project, Select, Join, Union_, Product, Intersect]


def children(e: RamExpr):
    if isinstance(e, Relation):
        return ()
    if isinstance(e, (Project, Select)):
        return (e.child,)
    return (e.left, e.right)


def relations_of(e: RamExpr) -> set[str]:
    if isinstance(e, Relation):
        return {e.name}
    out = set()
    for ch in children(e):
        out |= relations_of(ch)
    return out


@dataclass(frozen=True)
class RamRule:
    target: str
    expr: RamExpr


@dataclass
class RamStratum:
    relations: list
    rules: list
    recursive: bool = False


@dataclass
class RamProgram:
    strata: list
    schemas: dict = field(default_factory=dict)

    @property
    def rules(self):
        return [r for s in self.strata for r in s.rules]


class RamError(ValueError):
    def __init__(self, errors):
        self.errors = errors
        super().__init__("; ".join(f"rule {i} at {p}: {m}" for i, p, m in errors))


def infer_kinds(e: RamExpr, schemas, path="root", errors=None) -> list[str] | None:
    """Column kinds of ``e``; problems are appended to ``errors`` as (path, msg)."""
    errs = errors if errors is not None else []

    def fail(msg):
        errs.append((path, msg))
        return None

    if isinstance(e, Relation):
        if e.name not in schemas:
            return fail(f"unknown relation {e.name!r}")
        return list(schemas[e.name])
    if isinstance(e, (Project, Select)):
        ck = infer_kinds(e.child, schemas, path + ".child", errs)
        if ck is None:
            return None
        fn = e.fn if isinstance(e, Project) else e.pred
        try:
            out = fn.output_kinds(ck)
        except TypeErr as ex:
            return fail(str(ex))
        if isinstance(e, Select):
            if out != ["bool"]:
                return fail("selection must produce exactly one boolean")
            return ck
        if "bool" in out:
            return fail("projection produces a boolean column")
        return out
    lk = infer_kinds(e.left, schemas, path + ".left", errs)
    rk = infer_kinds(e.right, schemas, path + ".right", errs)
    if lk is None or rk is None:
        return None
    if isinstance(e, Join):
        w = e.width
        if w < 0 or len(lk) < w or len(rk) < w:
            return fail(f"join width {w} exceeds operand arity ({len(lk)}, {len(rk)})")
        if lk[:w] != rk[:w]:
            return fail(f"join key kinds differ: {lk[:w]} vs {rk[:w]}")
        return lk + rk[w:]
    if isinstance(e, Product):
        return lk + rk
    if lk != rk:
        name = "union" if isinstance(e, Union_) else "intersect"
        return fail(f"{name} of mismatched schemas {lk} and {rk}")
    return lk


def validate(program, schemas=None) -> list:
    """Return a list of (rule index, node path, message); empty when valid."""
    if isinstance(program, RamProgram):
        rules = program.rules
        schemas = schemas or program.schemas
    else:
        rules = list(program)
    errors = []
    for i, rule in enumerate(rules):
        errs = []
        kinds = infer_kinds(rule.expr, schemas, "root", errs)
        for p, m in errs:
            errors.append((i, p, m))
        if kinds is None:
            continue
        if rule.target not in schemas:
            errors.append((i, "root", f"unknown target {rule.target!r}"))
        elif list(schemas[rule.target]) != kinds:
            errors.append((i, "root", f"rule yields {kinds}, {rule.target} expects {list(schemas[rule.target])}"))
    return errors


def check(program, schemas=None):
    errs = validate(program, schemas)
    if errs:
        raise RamError(errs)


def stratify(rules, schemas=None) -> RamProgram:
    """Group rules into strata: SCCs of the dependency graph in topological order."""
    g = nx.DiGraph()
    first_rule = {}
    for i, r in enumerate(rules):
        g.add_node(r.target)
        first_rule.setdefault(r.target, i)
        for src in relations_of(r.expr):
            g.add_edge(src, r.target)
    heads = set(first_rule)
    sub = g.subgraph(heads).copy()
    cond = nx.condensation(sub)
    rank = {c: min(first_rule[n] for n in cond.nodes[c]["members"]) for c in cond.nodes}
    strata = []
    for c in nx.lexicographical_topological_sort(cond, key=lambda c: rank[c]):
        members = cond.nodes[c]["members"]
        rels = sorted(members, key=lambda n: first_rule[n])
        srules = [r for r in rules if r.target in members]
        recursive = len(members) > 1 or any(sub.has_edge(n, n) for n in members)
        strata.append(RamStratum(rels, srules, recursive))
    return RamProgram(strata, dict(schemas or {}))


# -- text dump --------------------------------------------------------------------


def _head(e) -> str:
    if isinstance(e, Relation):
        return f"(relation {e.name})"
    if isinstance(e, Project):
        return f"(project {e.fn}"
    if isinstance(e, Select):
        return f"(select {e.pred}"
    if isinstance(e, Join):
        return f"(join {e.width}"
    return "(" + {Union_: "union", Product: "product", Intersect: "intersect"}[type(e)]


def dump_expr(e: RamExpr, indent=0) -> list[str]:
    pad = "  " * indent
    if isinstance(e, Relation):
        return [pad + _head(e)]
    lines = [pad + _head(e)]
    for ch in children(e):
        lines.extend(dump_expr(ch, indent + 1))
    lines[-1] += ")"
    return lines


def dump_program(p: RamProgram) -> str:
    out = []
    for k, s in enumerate(p.strata):
        tag = " recursive" if s.recursive else ""
        out.append(f"stratum {k} [{', '.join(s.relations)}]{tag}")
        for r in s.rules:
            out.append(f"  {r.target} <-")
            out.extend(dump_expr(r.expr, 2))
    return "\n".join(out) + ("\n" if out else "")


# -- reference evaluation -------------------------------------------------------------


def eval_expr_sets(e: RamExpr, env: dict, symbols=None) -> set:
    """Naive set semantics of ``e`` over ``env`` (relation -> set of tuples)."""
    if isinstance(e, Relation):
        return set(env.get(e.name, ()))
    if isinstance(e, Project):
        out = set()
        for t in eval_expr_sets(e.child, env, symbols):
            try:
                out.add(tuple(eval_scalar(o, t, symbols) for o in e.fn.outputs))
            except ZeroDivisionError:
                pass
        return out
    if isinstance(e, Select):
        out = set()
        for t in eval_expr_sets(e.child, env, symbols):
            try:
                if eval_scalar(e.pred.outputs[0], t, symbols):
                    out.add(t)
            except ZeroDivisionError:
                pass
        return out
    left = eval_expr_sets(e.left, env, symbols)
    right = eval_expr_sets(e.right, env, symbols)
    if isinstance(e, Union_):
        return left | right
    if isinstance(e, Intersect):
        return left & right
    w = 0 if isinstance(e, Product) else e.width
    return {a + b[w:] for a in left for b in right if a[:w] == b[:w]}
