"""End-to-end entry points: program text and facts in, populated database out."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import frontend, ram
from .apm import ApmProgram
from .compiler import CompileOptions, apply_batching, compile_program
from .db import Database, load_batch, load_edb
from .provenance import ProvenanceConfig
from .runtime.interpreter import ExecConfig, ExecStats, execute


@dataclass
class Compiled:
    ram: ram.RamProgram
    apm: ApmProgram
    surface: frontend.SurfaceProgram | None = None
    batched: bool = False

    @property
    def schemas(self) -> dict:
        return self.ram.schemas

    @property
    def inline_facts(self) -> list:
        if self.surface is None:
            return []
        return frontend.program_facts(self.surface)


@dataclass
class Result:
    db: Database
    stats: ExecStats
    compiled: Compiled
    queries: list = field(default_factory=list)


def compile_text(text: str, source: str = "<input>", options: CompileOptions | None = None,
                 batched: bool = False) -> Compiled:
    rp, surface = frontend.compile_source(text, source)
    return compile_ram(rp, options, batched, surface)


def compile_ram(rp: ram.RamProgram, options: CompileOptions | None = None, batched: bool = False,
                surface=None) -> Compiled:
    lowered = apply_batching(rp) if batched else rp
    return Compiled(rp, compile_program(lowered, options), surface, batched)


def _with_inline(compiled: Compiled, facts):
    return [(r, v, p) for r, v, p in compiled.inline_facts] + list(facts or [])


def run_compiled(compiled: Compiled, facts=None, provenance: ProvenanceConfig | str = "unit",
                 exec_cfg: ExecConfig | None = None) -> Result:
    cfg = provenance if isinstance(provenance, ProvenanceConfig) else ProvenanceConfig(provenance)
    if compiled.batched:
        return run_batch_compiled(compiled, [facts or []], cfg, exec_cfg)
    db = load_edb(_with_inline(compiled, facts), compiled.schemas, cfg)
    stats = execute(compiled.apm, db, exec_cfg)
    return Result(db, stats, compiled, _queries(compiled))


def run_batch_compiled(compiled: Compiled, samples, provenance: ProvenanceConfig | str = "unit",
                       exec_cfg: ExecConfig | None = None) -> Result:
    if not compiled.batched:
        raise ValueError("program was compiled without batching")
    cfg = provenance if isinstance(provenance, ProvenanceConfig) else ProvenanceConfig(provenance)
    db = load_batch([_with_inline(compiled, s) for s in samples], compiled.schemas, cfg, batched=True)
    stats = execute(compiled.apm, db, exec_cfg)
    return Result(db, stats, compiled, _queries(compiled))


def _queries(compiled: Compiled) -> list:
    if compiled.surface is None:
        return []
    return list(compiled.surface.queries)


def run(text: str, facts=None, provenance: ProvenanceConfig | str = "unit", exec_cfg: ExecConfig | None = None,
        options: CompileOptions | None = None, source: str = "<input>") -> Result:
    """Compile ``text`` and run it over ``facts`` (list of ``(rel, values[, prob[, group]])``)."""
    return run_compiled(compile_text(text, source, options), facts, provenance, exec_cfg)


def run_batch(text: str, samples, provenance: ProvenanceConfig | str = "unit", exec_cfg: ExecConfig | None = None,
              options: CompileOptions | None = None, source: str = "<input>") -> Result:
    """Run one program over several fact lists at once; rows carry their sample id."""
    return run_batch_compiled(compile_text(text, source, options, batched=True), samples, provenance, exec_cfg)
