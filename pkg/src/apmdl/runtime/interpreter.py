"""Fixpoint interpreter for compiled programs.

Strata run in order.  Before a stratum starts, every relation it reads from an
earlier stratum is settled into ``stable``.  Iteration 1 runs the ``once``
section, then ``loop`` and ``epilogue``; later iterations run ``loop`` and
``epilogue`` only, skipping static allocations and builds whose registers
survive from iteration 1.  When the stratum ends its relations are settled.
"""

from __future__ import annotations

import math
import time
from collections import defaultdict
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .. import apm
from ..columnar import VALUE_DTYPES
from ..db import Database, Table, concat_tables, settle, total_fact_count
from . import bytecode, kernels
from .hashindex import SLOT_DTYPE, next_pow2
from .memory import DEFAULT_ARENA, Allocator
from .parallel import WorkerPool, default_threads

TERMINATIONS = ("saturation", "size-only")


class ExecError(RuntimeError):
    pass


class FixpointError(ExecError):
    """The iteration limit was reached before a fixpoint."""


@dataclass
class ExecConfig:
    threads: int = field(default_factory=default_threads)
    occupancy: float = 2.0
    arena: bool = True
    reuse: bool = True
    termination: str = "saturation"
    max_iterations: int = 10000
    debug: bool = False
    arena_bytes: int = DEFAULT_ARENA
    observer: Callable | None = None  # called as observer(stratum, iteration, db) after each iteration

    def __post_init__(self):
        if self.termination not in TERMINATIONS:
            raise ValueError(f"termination must be one of {TERMINATIONS}")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if not self.occupancy >= 1.0:
            raise ValueError("occupancy must be at least 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")


@dataclass
class ExecStats:
    iterations: list = field(default_factory=list)  # per stratum
    kernel_ns: dict = field(default_factory=lambda: defaultdict(int))
    kernel_calls: dict = field(default_factory=lambda: defaultdict(int))
    fresh_allocations: int = 0
    fresh_per_iteration: list = field(default_factory=list)
    reuse_hits: int = 0
    reuse_misses: int = 0
    arena_grows: int = 0
    static_skips: int = 0
    hash_resizes: int = 0
    div_by_zero: int = 0
    grad_entries_dropped: int = 0
    wall_ns: int = 0

    @property
    def total_iterations(self) -> int:
        return sum(self.iterations)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["kernel_ns"] = dict(self.kernel_ns)
        d["kernel_calls"] = dict(self.kernel_calls)
        d["fresh_per_iteration"] = list(self.fresh_per_iteration)
        d["iterations"] = list(self.iterations)
        d["total_iterations"] = self.total_iterations
        return d


class VReg:
    """A register: a buffer, its live length, the size it was allocated for,
    the scan total (for ``last``) and, for hash registers, the index."""

    __slots__ = ("buf", "n", "req", "total", "index")

    def __init__(self, buf, req):
        self.buf = buf
        self.req = req
        self.n = 0
        self.total = 0
        self.index = None

    def view(self):
        return self.buf[: self.n]


def _dtype(kind, sr):
    if kind in VALUE_DTYPES:
        return np.dtype(VALUE_DTYPES[kind])
    if kind == "tag":
        return sr.dtype
    if kind == "idx":
        return np.dtype(np.int64)
    if kind == "mask":
        return np.dtype(bool)
    if kind == "hash":
        return SLOT_DTYPE
    raise ExecError(f"unknown register kind {kind!r}")


class Interpreter:
    def __init__(self, program: apm.ApmProgram, db: Database, cfg: ExecConfig | None = None):
        self.program = program
        self.db = db
        self.cfg = cfg or ExecConfig()
        self.sr = db.semiring
        self.alloc = Allocator(self.cfg.arena, self.cfg.reuse, arena_bytes=self.cfg.arena_bytes)
        self.stats = ExecStats()
        self.regs: dict[int, VReg] = {}
        self._bc: dict[int, bytecode.Bytecode] = {}
        self.pool: WorkerPool | None = None
        self._stratum_no = 0
        self._check_schemas()

    def _check_schemas(self):
        for rel, kinds in self.program.schemas.items():
            have = self.db.schemas.get(rel)
            if have is None:
                self.db.add_relation(rel, kinds[1:] if self.db.batched else kinds)
            elif tuple(have) != tuple(kinds):
                raise ExecError(f"{rel}: program expects columns {tuple(kinds)}, database has {tuple(have)}")

    # -- registers ---------------------------------------------------------------

    def reg(self, r: apm.Reg) -> VReg:
        try:
            return self.regs[r.id]
        except KeyError:
            raise ExecError(f"{r} read before it was allocated") from None

    def _put(self, r: apm.Reg, arr):
        v = self.reg(r)
        n = len(arr)
        if n > len(v.buf):
            raise ExecError(f"{r}: {n} rows exceed its allocation of {len(v.buf)}")
        v.buf[:n] = arr
        v.n = n

    def _size(self, s) -> float:
        if isinstance(s, apm.Size):
            return self.reg(s.reg).n
        if isinstance(s, apm.RelSize):
            return len(self.db.get(s.rel, s.part))
        if isinstance(s, apm.Last):
            return self.reg(s.reg).total
        if isinstance(s, apm.Occ):
            return self._size(s.inner) * self.cfg.occupancy
        if isinstance(s, apm.Sum):
            return sum(self._size(t) for t in s.terms)
        if isinstance(s, apm.Fixed):
            return s.n
        raise ExecError(f"bad size expression {s!r}")

    # -- instructions ------------------------------------------------------------

    def run_instr(self, ins, first: bool):
        if not first and getattr(ins, "static", False):
            self.stats.static_skips += 1
            return
        t0 = time.perf_counter_ns()
        getattr(self, "_" + type(ins).__name__.lower())(ins)
        name = apm.op_name(ins)
        self.stats.kernel_ns[name] += time.perf_counter_ns() - t0
        self.stats.kernel_calls[name] += 1

    def _alloc(self, ins: apm.Alloc):
        size = self._size(ins.size)
        if any(r.kind == "hash" for r in ins.regs):
            n = next_pow2(max(1, math.ceil(size)))
        else:
            n = int(math.ceil(size))
        bufs = self.alloc.alloc(ins.site, [_dtype(r.kind, self.sr) for r in ins.regs], n, ins.static)
        for r, b in zip(ins.regs, bufs):
            self.regs[r.id] = VReg(b, n)

    def _load(self, ins: apm.Load):
        t = self.db.get(ins.rel, ins.part)
        for r, col in zip(ins.dst, list(t.columns) + [t.tags]):
            self._put(r, col)

    def _store(self, ins: apm.Store):
        if not ins.src:
            self.db.clear(ins.rel, ins.part)
            return
        vals = [self.reg(r).view().copy() for r in ins.src]
        t = Table(vals[:-1], vals[-1])
        if ins.part == "delta":
            t = concat_tables([self.db.get(ins.rel, "delta"), t], self.db.schemas[ins.rel], self.sr)
        self.db.put(ins.rel, ins.part, t)

    def _bytecode(self, ins) -> bytecode.Bytecode:
        bc = self._bc.get(id(ins))
        if bc is None:
            bc = bytecode.compile_lambda(ins.fn, self.db.symbols.intern)
            self._bc[id(ins)] = bc
        return bc

    def _eval(self, ins: apm.Eval):
        src = [self.reg(r).view() for r in ins.src]
        n = len(src[0]) if src else self.reg(ins.dst[0] if ins.dst else ins.ok).req
        dts = bytecode.out_dtypes([r.kind for r in ins.dst])
        outs, ok = kernels.kernel_eval(self._bytecode(ins), src, n, dts, self.pool)
        if ok is not None:
            self.stats.div_by_zero += int((~ok).sum())
        if ins.ok is None and ok is not None and len(outs) == 1 and ins.dst[0].kind == "mask":
            outs[0] = outs[0] & ok
        for r, o in zip(ins.dst, outs):
            self._put(r, o)
        if ins.ok is not None:
            self._put(ins.ok, ok if ok is not None else np.ones(n, dtype=bool))

    def _gather(self, ins: apm.Gather):
        idx = self.reg(ins.index).view()
        src = [self.reg(r).view() for r in ins.src]
        n = len(idx)
        out = [self.reg(r) for r in ins.dst]
        for o in out:
            if n > len(o.buf):
                raise ExecError(f"gather of {n} rows overflows its allocation")
        kernels.kernel_gather(idx, src, self.pool, [o.buf[:n] for o in out])
        for o in out:
            o.n = n

    def _gatherreduce(self, ins: apm.GatherReduce):
        ia, ib = (self.reg(r).view() for r in ins.index)
        a, b = (self.reg(r).view() for r in ins.src)
        o = self.reg(ins.dst)
        n = len(ia)
        if n > len(o.buf):
            raise ExecError(f"gather of {n} rows overflows its allocation")
        kernels.kernel_gather_reduce(self.sr, (ia, ib), (a, b), self.pool, o.buf[:n])
        o.n = n

    def _build(self, ins: apm.Build):
        keys = [self.reg(r).view() for r in ins.keys]
        n = len(keys[0]) if keys else self.reg(ins.rows).n
        h = self.reg(ins.dst)

        def retry(cap):
            self.stats.hash_resizes += 1
            return np.empty(cap, dtype=SLOT_DTYPE)

        h.index = kernels.kernel_build(h.buf[: h.req], keys, n, self.pool, retry)
        h.n = h.index.capacity

    def _probe_n(self, probe, fallback: apm.Reg):
        keys = [self.reg(r).view() for r in probe]
        return keys, (len(keys[0]) if keys else self.reg(fallback).req)

    def _count(self, ins: apm.Count):
        keys, n = self._probe_n(ins.probe, ins.dst)
        self._put(ins.dst, kernels.kernel_count(self.reg(ins.index).index, keys, n, self.pool))

    def _scan(self, ins: apm.Scan):
        out, total = kernels.kernel_scan(self.reg(ins.src).view())
        self._put(ins.dst, out)
        self.reg(ins.dst).total = total

    def _joinidx(self, ins: apm.JoinIdx):
        c = self.reg(ins.counts)
        o = self.reg(ins.offsets)
        keys = [self.reg(r).view() for r in ins.probe]
        il, ir = kernels.kernel_join(self.reg(ins.index).index, keys, c.n, c.view(), o.view(), o.total, self.pool)
        self._put(ins.dst[0], il)
        self._put(ins.dst[1], ir)

    def _copy(self, ins: apm.Copy):
        for k, r in enumerate(ins.dst):
            parts = [self.reg(p[k]).view() for p in ins.srcs]
            self._put(r, parts[0] if len(parts) == 1 else np.concatenate(parts))

    def _split(self, regs):
        vals = [self.reg(r).view() for r in regs]
        return vals[:-1], vals[-1]

    def _write_pack(self, regs, cols, tags):
        for r, c in zip(regs, list(cols) + [tags]):
            self._put(r, c)

    def _sort(self, ins: apm.Sort):
        self._write_pack(ins.dst, *kernels.kernel_sort(*self._split(ins.src)))

    def _unique(self, ins: apm.Unique):
        cols, tags, k = kernels.kernel_unique(self.sr, *self._split(ins.src), debug=self.cfg.debug)
        self._write_pack(ins.dst, cols, tags)
        self._put(ins.count, np.array([k], dtype=np.int64))

    def _merge(self, ins: apm.Merge):
        a_cols, a_tags = self._split(ins.a)
        b_cols, b_tags = self._split(ins.b)
        cols, tags = kernels.kernel_merge(self.sr, a_cols, a_tags, b_cols, b_tags, combine=ins.op is not None,
                                          debug=self.cfg.debug)
        self._write_pack(ins.dst, cols, tags)

    def _compact(self, ins: apm.Compact):
        mask = self.reg(ins.mask).view()
        for r, s in zip(ins.dst, ins.src):
            self._put(r, kernels.kernel_compact(mask, [self.reg(s).view()])[0])

    def _diff(self, ins: apm.Diff):
        a_cols, a_tags = self._split(ins.a)
        b_cols, b_tags = self._split(ins.b)
        self._write_pack(ins.dst, *kernels.kernel_diff(self.sr, a_cols, a_tags, b_cols, b_tags))

    # -- driver ------------------------------------------------------------------

    def _run_section(self, body, first):
        for ins in body:
            self.run_instr(ins, first)

    def run_stratum(self, s: apm.ApmStratum) -> int:
        local = list(s.relations)
        reads = {i.rel for i in s.instructions() if isinstance(i, apm.Load)}
        for rel in sorted(reads - set(local)):
            settle(self.db, rel)
        self._bc.clear()
        static = self.program.static_regs
        size_only = self.cfg.termination == "size-only"
        prev = total_fact_count(self.db, local) if size_only else None
        k = 0
        while True:
            k += 1
            if k > self.cfg.max_iterations:
                raise FixpointError(f"stratum {local} did not reach a fixpoint in {self.cfg.max_iterations} iterations")
            first = k == 1
            self.regs = {i: v for i, v in self.regs.items() if i in {r.id for r in static}} if not first else {}
            if first:
                self._run_section(s.once, True)
            self._run_section(s.loop, first)
            self._run_section(s.epilogue, first)
            self.alloc.end_iteration()
            if self.cfg.observer is not None:
                self.cfg.observer(self._stratum_no, k, self.db)
            if not s.recursive:
                break
            if size_only:
                cur = total_fact_count(self.db, local)
                if cur == prev:
                    break
                prev = cur
            elif all(len(self.db.get(r, "recent")) == 0 for r in local):
                break
        for rel in local:
            settle(self.db, rel)
        self.regs = {}
        return k

    def run(self) -> ExecStats:
        t0 = time.perf_counter_ns()
        dropped0 = self.sr.stats.get("grad_entries_dropped", 0)
        with WorkerPool(self.cfg.threads) as pool:
            self.pool = pool if pool.threads > 1 else None
            for self._stratum_no, s in enumerate(self.program.strata):
                self.stats.iterations.append(self.run_stratum(s))
        self.pool = None
        a = self.alloc.stats
        st = self.stats
        st.fresh_allocations = a.fresh
        st.fresh_per_iteration = list(a.per_iteration)
        st.reuse_hits, st.reuse_misses, st.arena_grows = a.reuse_hits, a.reuse_misses, a.arena_grows
        st.grad_entries_dropped = self.sr.stats.get("grad_entries_dropped", 0) - dropped0
        st.wall_ns = time.perf_counter_ns() - t0
        return st


def execute(program: apm.ApmProgram, db: Database, cfg: ExecConfig | None = None) -> ExecStats:
    """Run ``program`` to a fixpoint over ``db`` (updated in place)."""
    return Interpreter(program, db, cfg).run()
