"""Datalog surface language: parsing and planning into RAM.

Grammar (informal)::

    program := item*
    item    := 'type' NAME '=' TYPE
             | 'type' NAME '(' [NAME ':' TYPE {',' NAME ':' TYPE}] ')'
             | 'rel' NAME '=' '{' [fact {',' fact}] '}' ['.']
             | 'rel' atom [(':-' | '=') body] ['.']
             | [PROB '::'] atom '.'                      (a fact)
             | 'query' NAME ['.']
    body    := conj {'or' conj}
    conj    := unit {('and' | ',') unit}
    unit    := atom | '(' body ')' | expr CMP expr
    fact    := [PROB '::'] '(' const {',' const} ')'

Atom arguments are variables, constants or ``_``.  Head arguments may be any
scalar expression over body variables.  ``v == expr`` (or ``v = expr``) with
``v`` otherwise unbound binds ``v``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

from . import ram
from ._lexer import Cursor, SyntaxErr, Tok, tokenize
from .ram import BinOp, Col, Const, Lambda, Not, Project, RamRule, Relation, Select

TYPE_NAMES = {
    **{t: "i64" for t in ("i8", "i16", "i32", "i64", "i128", "isize", "u8", "u16", "u32", "u64", "u128", "usize",
                          "int")},
    **{t: "f64" for t in ("f32", "f64", "float")},
    **{t: "sym" for t in ("String", "string", "Symbol", "symbol", "str")},
}


class PlanError(ValueError):
    pass


class PlanWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Wild:
    pass


@dataclass
class Atom:
    rel: str
    args: list
    tok: Tok | None = None


@dataclass
class Compare:
    expr: object  # surface scalar over Var leaves
    tok: Tok | None = None


@dataclass
class SurfaceRule:
    head: Atom
    body: list  # conjunction of Atom | Compare
    line: int = 0


@dataclass
class SurfaceProgram:
    decls: dict = field(default_factory=dict)  # relation -> kinds
    rules: list = field(default_factory=list)
    facts: list = field(default_factory=list)  # (rel, tuple, prob)
    queries: list = field(default_factory=list)
    aliases: dict = field(default_factory=dict)
    source: str = "<input>"


# -- parser -------------------------------------------------------------------


class _Parser:
    def __init__(self, text, source):
        self.c = Cursor(tokenize(text, source), source)
        self.prog = SurfaceProgram()

    def parse(self) -> SurfaceProgram:
        c = self.c
        while c.cur.kind != "EOF":
            if c.accept("type"):
                self.type_decl()
            elif c.accept("rel"):
                self.rel_item()
            elif c.accept("query"):
                self.prog.queries.append(c.expect_kind("NAME").text)
                c.accept(".")
            elif c.cur.kind == "NUM" and c.peek().text == "::":
                self.fact_atom()
            elif c.cur.kind == "NAME" and c.peek().text == "(":
                self.fact_atom()
            else:
                c.error(f"unexpected {c.cur.text!r}")
        return self.prog

    def type_name(self):
        t = self.c.expect_kind("NAME")
        if t.text in self.prog.aliases:
            return self.prog.aliases[t.text]
        if t.text in TYPE_NAMES:
            return TYPE_NAMES[t.text]
        self.c.error(f"unknown type {t.text!r}", t)

    def type_decl(self):
        c = self.c
        name = c.expect_kind("NAME")
        if c.accept("="):
            self.prog.aliases[name.text] = self.type_name()
            return
        c.expect("(")
        kinds = []
        while not c.at(")"):
            if c.cur.kind == "NAME" and c.peek().text == ":":
                c.advance()
                c.advance()
            kinds.append(self.type_name())
            if not c.accept(","):
                break
        c.expect(")")
        if name.text in self.prog.decls and self.prog.decls[name.text] != tuple(kinds):
            c.error(f"conflicting declarations of {name.text!r}", name)
        self.prog.decls[name.text] = tuple(kinds)
        c.accept(".")

    def rel_item(self):
        c = self.c
        if c.cur.kind == "NAME" and c.peek().text == "=" and c.peek(2).text == "{":
            name = c.advance().text
            c.advance()
            c.advance()
            while not c.at("}"):
                prob = self.prob_prefix()
                vals = self.const_tuple()
                self.prog.facts.append((name, vals, prob))
                if not c.accept(","):
                    break
            c.expect("}")
            c.accept(".")
            return
        prob = self.prob_prefix()
        head = self.atom(head=True)
        if c.accept(":-") or c.accept("="):
            if prob is not None:
                c.error("probabilities are only allowed on facts")
            body = self.disj()
            c.accept(".")
            for conj in body:
                self.prog.rules.append(SurfaceRule(head, conj, head.tok.line if head.tok else 0))
            return
        c.accept(".")
        self.head_fact(head, prob)

    def fact_atom(self):
        prob = self.prob_prefix()
        head = self.atom(head=True)
        self.c.accept(".")
        self.head_fact(head, prob)

    def head_fact(self, head, prob):
        vals = []
        for a in head.args:
            if not isinstance(a, Const):
                self.c.error(f"fact {head.rel} has a non-constant argument", head.tok)
            vals.append(a)
        self.prog.facts.append((head.rel, tuple(vals), prob))

    def prob_prefix(self):
        c = self.c
        if c.cur.kind == "NUM" and c.peek().text == "::":
            v = float(c.advance().text)
            c.advance()
            return v
        return None

    def const_tuple(self):
        c = self.c
        c.expect("(")
        vals = []
        sp = ram.ScalarParser(c, lambda t: c.error(f"facts must be constant, found {t.text!r}", t))
        while not c.at(")"):
            e = sp.unary()
            if not isinstance(e, Const):
                c.error("facts must be constant")
            vals.append(e)
            if not c.accept(","):
                break
        c.expect(")")
        return tuple(vals)

    def atom(self, head=False):
        c = self.c
        name = c.expect_kind("NAME")
        c.expect("(")
        args = []
        while not c.at(")"):
            args.append(self.head_arg() if head else self.body_arg())
            if not c.accept(","):
                break
        c.expect(")")
        return Atom(name.text, args, name)

    def body_arg(self):
        c = self.c
        if c.cur.kind == "NAME" and c.cur.text == "_":
            c.advance()
            return Wild()
        e = ram.ScalarParser(c, lambda t: Var(t.text)).unary()
        if not isinstance(e, (Var, Const)):
            c.error("atom arguments must be variables, constants or _")
        return e

    def head_arg(self):
        return ram.ScalarParser(self.c, lambda t: Var(t.text)).expr(3)

    # bodies come back in disjunctive normal form: a list of conjunctions
    def disj(self):
        out = self.conj()
        while self.c.accept("or"):
            out = out + self.conj()
        return out

    def conj(self):
        out = self.unit()
        while self.c.accept("and") or self.c.accept(","):
            rhs = self.unit()
            out = [a + b for a in out for b in rhs]
        return out

    def unit(self):
        c = self.c
        if c.cur.kind == "NAME" and c.peek().text == "(" and c.cur.text not in ("not",):
            return [[self.atom()]]
        if c.at("("):
            save = c.i
            c.advance()
            try:
                inner = self.disj()
                c.expect(")")
                if not c.at(*ram.COMPARE, "+", "-", "*", "/", "="):
                    return inner
            except SyntaxErr:
                pass
            c.i = save
        tok = c.cur
        e = ram.ScalarParser(c, lambda t: Var(t.text)).expr(2)
        if c.at("="):
            c.advance()
            e = BinOp("==", e, ram.ScalarParser(c, lambda t: Var(t.text)).expr(3))
        if not (isinstance(e, Not) or (isinstance(e, BinOp) and e.op in ram.COMPARE + ram.LOGIC)):
            c.error("expected an atom or a comparison", tok)
        return [[Compare(e, tok)]]


def parse(text: str, source: str = "<input>") -> SurfaceProgram:
    prog = _Parser(text, source).parse()
    prog.source = source
    _check_range(prog, source)
    return prog


def parse_file(path: str) -> SurfaceProgram:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read(), path)


def _vars(e) -> set[str]:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, BinOp):
        return _vars(e.left) | _vars(e.right)
    if isinstance(e, Not):
        return _vars(e.arg)
    if isinstance(e, Atom):
        return set().union(*[_vars(a) for a in e.args]) if e.args else set()
    if isinstance(e, Compare):
        return _vars(e.expr)
    return set()


def _bindable(c: Compare):
    """(var, expr) when ``c`` is ``v == expr`` that can bind ``v``."""
    e = c.expr
    if isinstance(e, BinOp) and e.op == "==":
        out = []
        if isinstance(e.left, Var):
            out.append((e.left.name, e.right))
        if isinstance(e.right, Var):
            out.append((e.right.name, e.left))
        return out
    return []


def _bound_vars(rule: SurfaceRule) -> set[str]:
    bound = set()
    for lit in rule.body:
        if isinstance(lit, Atom):
            bound |= _vars(lit)
    changed = True
    while changed:
        changed = False
        for lit in rule.body:
            if isinstance(lit, Compare):
                for v, ex in _bindable(lit):
                    if v not in bound and _vars(ex) <= bound:
                        bound.add(v)
                        changed = True
    return bound


def _check_range(prog: SurfaceProgram, source):
    for r in prog.rules:
        bound = _bound_vars(r)
        free = _vars(r.head) - bound
        if free:
            t = r.head.tok
            raise SyntaxErr(
                f"head variable(s) {', '.join(sorted(free))} of {r.head.rel} not bound by a positive atom",
                t.line if t else 0, t.col if t else 0, source)
        for lit in r.body:
            if isinstance(lit, Compare):
                loose = _vars(lit) - bound
                if loose:
                    t = lit.tok
                    raise SyntaxErr(f"variable(s) {', '.join(sorted(loose))} in comparison are unbound",
                                    t.line if t else 0, t.col if t else 0, source)


# -- typing ---------------------------------------------------------------------------


def _const_kind(c: Const) -> str:
    return c.kind


def _surface_kind(e, env):
    if isinstance(e, Var):
        return env[e.name]
    if isinstance(e, Const):
        return e.kind
    if isinstance(e, Not):
        return "bool"
    a, b = _surface_kind(e.left, env), _surface_kind(e.right, env)
    if e.op in ram.COMPARE or e.op in ram.LOGIC:
        return "bool"
    if a is None or b is None:
        return None
    return "f64" if "f64" in (a, b) else "i64"


def infer_schemas(prog: SurfaceProgram) -> dict:
    """Declared schemas plus inferred ones for undeclared relations."""
    schemas = dict(prog.decls)
    for rel, vals, _ in prog.facts:
        kinds = tuple(v.kind for v in vals)
        if rel not in schemas:
            schemas[rel] = kinds
    heads = {r.head.rel for r in prog.rules}
    known_rels = set(schemas) | heads
    for r in prog.rules:
        for lit in r.body:
            if isinstance(lit, Atom) and lit.rel not in known_rels:
                t = lit.tok
                raise SyntaxErr(f"unknown relation {lit.rel!r}", t.line if t else 0, t.col if t else 0,
                                prog.source)
    changed = True
    while changed:
        changed = False
        for r in prog.rules:
            if r.head.rel in schemas:
                continue
            atoms = [l for l in r.body if isinstance(l, Atom)]
            if any(a.rel not in schemas for a in atoms):
                continue
            env = _var_kinds(r, schemas)
            kinds = tuple(_surface_kind(a, env) for a in r.head.args)
            if None in kinds:
                continue
            schemas[r.head.rel] = kinds
            changed = True
    missing = sorted(heads - set(schemas))
    if missing:
        raise PlanError(f"cannot infer column types of {', '.join(missing)}; add a type declaration")
    return schemas


def _var_kinds(r: SurfaceRule, schemas) -> dict:
    env = {}
    for lit in r.body:
        if isinstance(lit, Atom):
            for a, k in zip(lit.args, schemas[lit.rel]):
                if isinstance(a, Var):
                    env.setdefault(a.name, k)
    changed = True
    while changed:
        changed = False
        for lit in r.body:
            if isinstance(lit, Compare):
                for v, ex in _bindable(lit):
                    if v not in env and _vars(ex) <= set(env):
                        env[v] = _surface_kind(ex, env)
                        changed = True
    return env


# -- planning -------------------------------------------------------------------------


def _to_scalar(e, cols: dict):
    if isinstance(e, Var):
        return Col(cols[e.name])
    if isinstance(e, Const):
        return e
    if isinstance(e, Not):
        return Not(_to_scalar(e.arg, cols))
    return BinOp(e.op, _to_scalar(e.left, cols), _to_scalar(e.right, cols))


def _coerce(c: Const, kind: str):
    """Constant converted to a column kind, or None when it can never match."""
    if kind == "sym":
        return c if c.kind == "sym" else None
    if c.kind == "sym" or c.kind == "bool":
        return None
    if kind == "f64":
        return Const(float(c.value), "f64")
    if c.kind == "f64":
        return Const(int(c.value), "i64") if float(c.value).is_integer() else None
    return c


def _false(arity):
    return Lambda(arity, (Const(False, "bool"),))


def _and_all(preds):
    out = preds[0]
    for p in preds[1:]:
        out = BinOp("and", out, p)
    return out


class _RulePlanner:
    def __init__(self, rule: SurfaceRule, schemas, warn):
        self.rule = rule
        self.schemas = schemas
        self.warn = warn

    def atom_expr(self, a: Atom):
        kinds = self.schemas[a.rel]
        if len(kinds) != len(a.args):
            raise PlanError(f"{a.rel} has arity {len(kinds)} but is used with {len(a.args)} arguments")
        expr = Relation(a.rel)
        preds, seen, keep, dead = [], {}, [], False
        for i, (arg, k) in enumerate(zip(a.args, kinds)):
            if isinstance(arg, Const):
                cc = _coerce(arg, k)
                if cc is None:
                    self.warn(f"constant {ram._fmt_const(arg)} can never match column {i} of {a.rel} ({k})")
                    dead = True
                else:
                    preds.append(BinOp("==", Col(i), cc))
            elif isinstance(arg, Var):
                if arg.name in seen:
                    preds.append(BinOp("==", Col(seen[arg.name]), Col(i)))
                else:
                    seen[arg.name] = i
                    keep.append(i)
        if dead:
            expr = Select(_false(len(kinds)), expr)
        elif preds:
            expr = Select(Lambda(len(kinds), (_and_all(preds),)), expr)
        if keep != list(range(len(kinds))):
            expr = Project(Lambda.permutation(len(kinds), keep), expr)
        names = [a.args[i].name for i in keep]
        return expr, names

    def plan(self) -> RamRule:
        r = self.rule
        atoms = [l for l in r.body if isinstance(l, Atom)]
        pending = [l for l in r.body if isinstance(l, Compare)]
        expr, names = None, []
        for a in atoms:
            aexpr, anames = self.atom_expr(a)
            if expr is None:
                expr, names = aexpr, anames
            else:
                shared = [v for v in anames if v in names]
                arest = [v for v in anames if v not in shared]
                rrest = [v for v in names if v not in shared]
                aperm = [anames.index(v) for v in shared + arest]
                rperm = [names.index(v) for v in shared + rrest]
                if aperm != list(range(len(anames))):
                    aexpr = Project(Lambda.permutation(len(anames), aperm), aexpr)
                if rperm != list(range(len(names))):
                    expr = Project(Lambda.permutation(len(names), rperm), expr)
                if shared:
                    expr = ram.Join(len(shared), aexpr, expr)
                else:
                    expr = ram.Product(aexpr, expr)
                names = shared + arest + rrest
            expr, names, pending = self.apply_constraints(expr, names, pending)
        if expr is None:
            raise PlanError(f"rule for {r.head.rel} has no positive atom")
        if pending:
            raise PlanError(f"unbound comparison in rule for {r.head.rel}")
        cols = {v: i for i, v in enumerate(names)}
        kinds = self.schemas[r.head.rel]
        outs = []
        for arg, k in zip(r.head.args, kinds):
            s = _to_scalar(arg, cols)
            if isinstance(s, Const):
                cc = _coerce(s, k)
                if cc is None:
                    raise PlanError(f"constant {ram._fmt_const(s)} does not fit {r.head.rel} column kind {k}")
                s = cc
            outs.append(s)
        if len(outs) != len(kinds):
            raise PlanError(f"{r.head.rel} has arity {len(kinds)} but the head has {len(outs)} arguments")
        return RamRule(r.head.rel, Project(Lambda(len(names), tuple(outs)), expr))

    def apply_constraints(self, expr, names, pending):
        progress = True
        while progress:
            progress = False
            rest = []
            for c in pending:
                vs = _vars(c)
                if vs <= set(names):
                    cols = {v: i for i, v in enumerate(names)}
                    pred = _to_scalar(c.expr, cols)
                    if not vs:
                        if not ram.eval_scalar(pred, ()):
                            self.warn("constant comparison is always false")
                            expr = Select(_false(len(names)), expr)
                        continue
                    expr = Select(Lambda(len(names), (pred,)), expr)
                    progress = True
                    continue
                bind = [(v, ex) for v, ex in _bindable(c) if v not in names and _vars(ex) <= set(names)]
                if bind:
                    v, ex = bind[0]
                    cols = {n: i for i, n in enumerate(names)}
                    outs = tuple(Col(i) for i in range(len(names))) + (_to_scalar(ex, cols),)
                    expr = Project(Lambda(len(names), outs), expr)
                    names = names + [v]
                    progress = True
                    continue
                rest.append(c)
            pending = rest
        return expr, names, pending


def plan(prog: SurfaceProgram, schemas: dict | None = None):
    """Plan every rule; returns ``(rules, schemas, warnings)``."""
    if schemas is None:
        schemas = infer_schemas(prog)
    notes = []

    def warn(msg):
        notes.append(msg)
        warnings.warn(msg, PlanWarning, stacklevel=3)

    rules = []
    for r in prog.rules:
        try:
            rules.append(_RulePlanner(r, schemas, warn).plan())
        except PlanError as e:
            raise PlanError(f"{prog.source}:{r.line}: {e}") from None
    errs = ram.validate(rules, schemas)
    if errs:
        raise ram.RamError(errs)
    return rules, schemas, notes


def program_facts(prog: SurfaceProgram):
    """Facts written inline in the program, as ``(rel, values, prob)``."""
    out = []
    for rel, vals, prob in prog.facts:
        out.append((rel, tuple(v.value for v in vals), prob))
    return out


def compile_source(text: str, source="<input>"):
    """Parse, plan and stratify.  Returns ``(RamProgram, SurfaceProgram)``."""
    prog = parse(text, source)
    rules, schemas, _ = plan(prog)
    return ram.stratify(rules, schemas), prog
