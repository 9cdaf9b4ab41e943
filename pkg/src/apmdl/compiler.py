"""RAM to APM lowering with semi-naive evaluation.

Per stratum:

* the part of each rule that survives with every stratum-local relation empty
  (all of it, for rules that read no local relation) goes to the ``once``
  section and runs only in the first iteration, reading ``stable``;
* the remaining rules go to ``loop``; each compiles its delta expression, where a
  local relation contributes its ``recent`` facts and a join contributes the
  stable/recent, recent/stable and recent/recent variants concatenated together;
* the ``epilogue`` folds recent into stable, deduplicates delta, keeps the rows
  that are new or still improving, and stores them as the next frontier.

Relations from earlier strata are settled into ``stable`` before the stratum
starts, so their loads are constant across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import ram
from .apm import (Alloc, ApmProgram, ApmStratum, Build, Compact, Copy, Count, Diff, Eval, Fixed, Gather,
                  GatherReduce, JoinIdx, Last, Load, Merge, Occ, Reg, RelSize, Scan, Size, Sort, Store,
                  Sum, Unique)
from .ram import Intersect, Join, Product, Project, RamProgram, Relation, Select, Union_

OTIMES = "⊗"
OPLUS = "⊕"


@dataclass(frozen=True)
class _Part:
    """A relation leaf pinned to one partition."""

    name: str
    part: str


@dataclass(frozen=True)
class _Append:
    items: tuple


@dataclass
class CompileOptions:
    diff_delta: bool = False
    static_regs: bool = True


@dataclass
class Pack:
    """Value registers plus a tag register describing one table."""

    values: tuple
    tag: Reg

    @property
    def regs(self):
        return self.values + (self.tag,)

    @property
    def first(self):
        return self.values[0] if self.values else self.tag


class CompileCtx:
    def __init__(self, schemas, options: CompileOptions | None = None):
        self.schemas = schemas
        self.options = options or CompileOptions()
        self.next_reg = 0
        self.next_site = 0
        self.out: list = []

    def regs(self, kinds) -> tuple:
        out = []
        for k in kinds:
            out.append(Reg(self.next_reg, k))
            self.next_reg += 1
        return tuple(out)

    def alloc(self, regs, size, static=False):
        self.out.append(Alloc(self.next_site, tuple(regs), size, static))
        self.next_site += 1

    def emit(self, ins):
        self.out.append(ins)

    def new_pack(self, kinds, size) -> Pack:
        regs = self.regs(list(kinds) + ["tag"])
        self.alloc(regs, size)
        return Pack(regs[:-1], regs[-1])

    # -- expressions -------------------------------------------------------------

    def kinds_of(self, e):
        return ram.infer_kinds(_unpin(e), self.schemas)

    def compile(self, e) -> Pack:
        if isinstance(e, (_Part, Relation)):
            name, part = (e.name, e.part) if isinstance(e, _Part) else (e.name, "stable")
            p = self.new_pack(self.schemas[name], RelSize(name, part))
            self.emit(Load(name, part, p.regs))
            return p
        if isinstance(e, Project):
            return self.project(e.fn, self.compile(e.child))
        if isinstance(e, Select):
            return self.select(e.pred, self.compile(e.child))
        if isinstance(e, Join):
            return self.join(e.width, e.left, e.right)
        if isinstance(e, Product):
            return self.join(0, e.left, e.right)
        if isinstance(e, Intersect):
            # full-width join: output is the left tuple, tags combine with ⊗
            return self.join(len(self.kinds_of(e.left)), e.left, e.right)
        if isinstance(e, Union_):
            return self.union(e.left, e.right)
        if isinstance(e, _Append):
            return self.append([self.compile(x) for x in e.items], self.kinds_of(e.items[0]))
        raise TypeError(f"cannot compile {e!r}")

    def project(self, fn: ram.Lambda, child: Pack) -> Pack:
        kinds = fn.output_kinds([r.kind for r in child.values])
        divides = any(ram.has_division(o) for o in fn.outputs)
        regs = self.regs(list(kinds) + ["tag"] + (["mask"] if divides else []))
        self.alloc(regs, Size(child.first))
        vals, tag = regs[: len(kinds)], regs[len(kinds)]
        ok = regs[-1] if divides else None
        if vals or ok:
            self.emit(Eval(vals, fn, child.values, ok))
        self.emit(Copy((tag,), ((child.tag,),)))
        out = Pack(vals, tag)
        if ok is not None:
            out = self.compact(ok, out)
        return out

    def compact(self, mask: Reg, src: Pack) -> Pack:
        (o,) = self.regs(["idx"])
        self.alloc((o,), Size(mask))
        self.emit(Scan(o, mask))
        out = self.new_pack([r.kind for r in src.values], Last(o))
        self.emit(Compact(out.regs, mask, src.regs))
        return out

    def select(self, pred: ram.Lambda, child: Pack) -> Pack:
        (m,) = self.regs(["mask"])
        self.alloc((m,), Size(child.first))
        self.emit(Eval((m,), pred, child.values))
        return self.compact(m, child)

    def join(self, w: int, left, right) -> Pack:
        a = self.compile(left)
        b = self.compile(right)
        akeys, bkeys = a.values[:w], b.values[:w]
        (h,) = self.regs(["hash"])
        self.alloc((h,), Occ(Size(a.first)))
        self.emit(Build(h, akeys, rows=None if w else a.tag))
        c, o = self.regs(["idx", "idx"])
        self.alloc((c, o), Size(b.first))
        self.emit(Count(c, bkeys, h, akeys))
        self.emit(Scan(o, c))
        il, ir = self.regs(["idx", "idx"])
        kinds = [r.kind for r in a.values] + [r.kind for r in b.values[w:]]
        outs = self.regs(kinds + ["tag"])
        self.alloc((il, ir) + outs, Last(o))
        self.emit(JoinIdx(w, (il, ir), bkeys, akeys, h, c, o))
        na = len(a.values)
        if na:
            self.emit(Gather(outs[:na], il, a.values))
        if len(b.values) > w:
            self.emit(Gather(outs[na:-1], ir, b.values[w:]))
        self.emit(GatherReduce(outs[-1], OTIMES, (il, ir), (a.tag, b.tag)))
        return Pack(outs[:-1], outs[-1])

    def sort(self, p: Pack) -> Pack:
        out = self.new_pack([r.kind for r in p.values], Size(p.first))
        self.emit(Sort(out.regs, p.regs))
        return out

    def union(self, left, right) -> Pack:
        a = self.sort(self.compile(left))
        b = self.sort(self.compile(right))
        out = self.new_pack([r.kind for r in a.values], Sum((Size(a.first), Size(b.first))))
        self.emit(Merge(out.regs, None, a.regs, b.regs))
        return out

    def append(self, packs, kinds) -> Pack:
        # `append` has no instruction of its own: one concatenating copy into a sized allocation
        if len(packs) == 1:
            return packs[0]
        out = self.new_pack(kinds, Sum(tuple(Size(p.first) for p in packs)))
        self.emit(Copy(out.regs, tuple(p.regs for p in packs)))
        return out

    # -- strata ------------------------------------------------------------------

    def take(self) -> list:
        out, self.out = self.out, []
        return out

    def rule_body(self, target, expr):
        p = self.compile(expr)
        self.emit(Store(target, "delta", p.regs))

    def epilogue(self, rel):
        kinds = self.schemas[rel]
        s = self.new_pack(kinds, RelSize(rel, "stable"))
        self.emit(Load(rel, "stable", s.regs))
        r = self.new_pack(kinds, RelSize(rel, "recent"))
        self.emit(Load(rel, "recent", r.regs))
        d = self.new_pack(kinds, RelSize(rel, "delta"))
        self.emit(Load(rel, "delta", d.regs))
        n = self.new_pack(kinds, Sum((Size(s.first), Size(r.first))))
        self.emit(Merge(n.regs, OPLUS, s.regs, r.regs))
        if self.options.diff_delta:
            e = self.new_pack(kinds, Size(d.first))
            self.emit(Diff(e.regs, d.regs, n.regs))
            d = e
        ds = self.sort(d)
        du = self.new_pack(kinds, Size(ds.first))
        (cnt,) = self.regs(["idx"])
        self.alloc((cnt,), Fixed(1))
        self.emit(Unique(du.regs, cnt, OPLUS, ds.regs))
        f = self.new_pack(kinds, Size(du.first))
        self.emit(Diff(f.regs, du.regs, n.regs))
        self.emit(Store(rel, "stable", n.regs))
        self.emit(Store(rel, "recent", f.regs))
        self.emit(Store(rel, "delta", ()))


def _unpin(e):
    if isinstance(e, _Part):
        return Relation(e.name)
    if isinstance(e, Relation):
        return e
    if isinstance(e, _Append):
        return _unpin(e.items[0])
    if isinstance(e, Project):
        return Project(e.fn, _unpin(e.child))
    if isinstance(e, Select):
        return Select(e.pred, _unpin(e.child))
    return type(e)(*([e.width] if isinstance(e, Join) else []), _unpin(e.left), _unpin(e.right))


def pin_stable(e):
    """Every leaf reads the stable partition."""
    if isinstance(e, Relation):
        return _Part(e.name, "stable")
    if isinstance(e, Project):
        return Project(e.fn, pin_stable(e.child))
    if isinstance(e, Select):
        return Select(e.pred, pin_stable(e.child))
    if isinstance(e, Join):
        return Join(e.width, pin_stable(e.left), pin_stable(e.right))
    return type(e)(pin_stable(e.left), pin_stable(e.right))


def _mk_append(items):
    items = [x for x in items if x is not None]
    if not items:
        return None
    return items[0] if len(items) == 1 else _Append(tuple(items))


def delta_expr(e, local: set):
    """Expression for the new derivations of ``e`` this iteration, or None when provably empty."""
    if isinstance(e, Relation):
        return _Part(e.name, "recent") if e.name in local else None
    if isinstance(e, Project):
        d = delta_expr(e.child, local)
        return None if d is None else Project(e.fn, d)
    if isinstance(e, Select):
        d = delta_expr(e.child, local)
        return None if d is None else Select(e.pred, d)
    if isinstance(e, Union_):
        return _mk_append([delta_expr(e.left, local), delta_expr(e.right, local)])
    dl, dr = delta_expr(e.left, local), delta_expr(e.right, local)
    sl, sr = pin_stable(e.left), pin_stable(e.right)

    def mk(l, r):
        if l is None or r is None:
            return None
        if isinstance(e, Join):
            return Join(e.width, l, r)
        return type(e)(l, r)

    # stable/recent, recent/stable, recent/recent, in that order
    return _mk_append([mk(sl, dr), mk(dl, sr), mk(dl, dr)])


def zero_expr(e, local: set):
    """``e`` with every local relation read as empty (leaves pinned to stable), or None
    when that is provably empty.  This is what a rule derives before any local fact exists."""
    if isinstance(e, Relation):
        return None if e.name in local else _Part(e.name, "stable")
    if isinstance(e, (Project, Select)):
        z = zero_expr(e.child, local)
        return None if z is None else type(e)(e.fn if isinstance(e, Project) else e.pred, z)
    l, r = zero_expr(e.left, local), zero_expr(e.right, local)
    if isinstance(e, Union_):
        if l is None or r is None:
            return l if r is None else r
        return Union_(l, r)
    if l is None or r is None:
        return None
    return Join(e.width, l, r) if isinstance(e, Join) else type(e)(l, r)


def compile_expr(e, schemas, local=(), options=None):
    """Compile one expression; returns ``(instructions, result registers)``.

    Leaves read ``stable``; wrap ``e`` with :func:`delta_expr` for the
    semi-naive form.
    """
    ctx = CompileCtx(schemas, options)
    p = ctx.compile(e)
    return ctx.take(), p.regs


def compile_stratum(stratum: ram.RamStratum, ctx: CompileCtx) -> ApmStratum:
    local = set(stratum.relations)
    out = ApmStratum(list(stratum.relations), recursive=stratum.recursive)
    for rule in stratum.rules:
        z = zero_expr(rule.expr, local)
        if z is not None:
            ctx.rule_body(rule.target, z)
            out.once.extend(ctx.take())
        if ram.relations_of(rule.expr) & local:
            d = delta_expr(rule.expr, local)
            if d is not None:
                ctx.rule_body(rule.target, d)
                out.loop.extend(ctx.take())
    for rel in stratum.relations:
        ctx.epilogue(rel)
    out.epilogue = ctx.take()
    return out


def compile_program(p: RamProgram, options: CompileOptions | None = None, schemas=None) -> ApmProgram:
    schemas = schemas or p.schemas
    ram.check(p, schemas)
    options = options or CompileOptions()
    ctx = CompileCtx(schemas, options)
    strata = [compile_stratum(s, ctx) for s in p.strata]
    out = ApmProgram(strata, dict(schemas))
    if options.static_regs:
        out = mark_static_registers(out)
    return out


# -- passes ---------------------------------------------------------------------------


def mark_static_registers(p: ApmProgram) -> ApmProgram:
    """Flag hash indexes built from loop-invariant data as static.

    A register is invariant when it comes from a stable load of a relation that
    is not local to the stratum, or from instructions reading only invariant
    registers.  A static build (and its alloc) runs in the first iteration only.
    """
    strata = []
    for s in p.strata:
        local = set(s.relations)
        const: set = set()
        for ins in s.loop:
            if isinstance(ins, Load):
                if ins.part == "stable" and ins.rel not in local:
                    const.update(ins.dst)
            elif not isinstance(ins, Alloc) and ins.reads() and all(r in const for r in ins.reads()):
                const.update(ins.writes())
        static_h = set()
        loop = []
        for ins in s.loop:
            if isinstance(ins, Build) and all(r in const for r in ins.reads()):
                static_h.add(ins.dst)
                ins = replace(ins, static=True)
            loop.append(ins)
        loop = [replace(i, static=True) if isinstance(i, Alloc) and set(i.regs) & static_h else i for i in loop]
        strata.append(replace(s, loop=loop))
    return replace(p, strata=strata)


def strip_static(p: ApmProgram) -> ApmProgram:
    strata = []
    for s in p.strata:
        loop = [replace(i, static=False) if isinstance(i, (Alloc, Build)) else i for i in s.loop]
        strata.append(replace(s, loop=loop))
    return replace(p, strata=strata)


def _batch_expr(e):
    if isinstance(e, Relation):
        return e
    if isinstance(e, Project):
        return Project(e.fn.shifted(1), _batch_expr(e.child))
    if isinstance(e, Select):
        pred = ram.Lambda(e.pred.arity + 1, tuple(ram.shift_scalar(o, 1) for o in e.pred.outputs))
        return Select(pred, _batch_expr(e.child))
    if isinstance(e, Join):
        return Join(e.width + 1, _batch_expr(e.left), _batch_expr(e.right))
    if isinstance(e, Product):
        return Join(1, _batch_expr(e.left), _batch_expr(e.right))
    return type(e)(_batch_expr(e.left), _batch_expr(e.right))


def apply_batching(p: RamProgram) -> RamProgram:
    """Prefix every table with a sample-id column.

    Joins widen by one so rows of different samples never pair, products become
    one-column joins, and lambdas pass the sample id through untouched.
    """
    strata = []
    for s in p.strata:
        rules = [ram.RamRule(r.target, _batch_expr(r.expr)) for r in s.rules]
        strata.append(ram.RamStratum(list(s.relations), rules, s.recursive))
    schemas = {r: ("u8",) + tuple(k) for r, k in p.schemas.items()}
    return RamProgram(strata, schemas)
