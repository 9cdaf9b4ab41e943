"""Command line: ``run`` a program over facts, ``dump`` its IR, ``bench`` graph workloads."""

from __future__ import annotations

import argparse
import json
import os
import resource
import sys
import time
from dataclasses import dataclass

from . import apm, engine, ram
from ._lexer import SyntaxErr
from .compiler import CompileOptions, apply_batching
from .db import LoadError, read_facts_dir, write_relations
from .frontend import PlanError
from .provenance import KINDS, PROOF_KINDS, ProvenanceConfig, ProvenanceError
from .runtime.interpreter import TERMINATIONS, ExecConfig, ExecError
from .runtime.parallel import default_threads

EXIT_USAGE = 2

TC_PROGRAM = """\
type edge(i64, i64)
rel path(a, b) :- edge(a, b).
rel path(a, c) :- path(a, b), edge(b, c).
query path
"""

SG_PROGRAM = """\
type edge(i64, i64)
rel sg(x, y) :- edge(p, x), edge(p, y), x != y.
rel sg(x, y) :- edge(a, x), sg(a, b), edge(b, y).
query sg
"""

BENCH = {"tc": (TC_PROGRAM, "path"), "sg": (SG_PROGRAM, "sg")}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    program: str
    facts: str | None = None
    provenance: str = "unit"
    proof_cap: int | None = None
    occupancy: float = 2.0
    threads: int = 1
    batch: str | None = None
    batching: bool = True
    static_regs: bool = True
    diff_delta: bool = False
    arena: bool = True
    reuse: bool = True
    out: str | None = None
    stats: str | None = None
    termination: str = "saturation"
    epsilon: float = 0.0
    dump_ram: bool = False
    dump_apm: bool = False

    def validate(self):
        if self.proof_cap is not None and self.provenance not in PROOF_KINDS:
            raise UsageError(f"--proof-cap applies only to {', '.join(PROOF_KINDS)}")
        if self.facts and self.batch:
            raise UsageError("--facts and --batch are mutually exclusive")
        if self.threads < 1:
            raise UsageError("--threads must be at least 1")
        if not self.occupancy >= 1.0:
            raise UsageError("--occupancy must be at least 1")
        for path, what in ((self.program, "program file"), (self.facts, "facts directory"),
                           (self.batch, "batch directory")):
            if path and not os.path.exists(path):
                raise UsageError(f"{what} not found: {path}")

    def provenance_config(self) -> ProvenanceConfig:
        kw = {"saturation_epsilon": self.epsilon}
        if self.proof_cap is not None:
            kw["proof_cap"] = self.proof_cap
        return ProvenanceConfig(self.provenance, **kw)

    def compile_options(self) -> CompileOptions:
        return CompileOptions(diff_delta=self.diff_delta, static_regs=self.static_regs)

    def exec_config(self) -> ExecConfig:
        return ExecConfig(threads=self.threads, occupancy=self.occupancy, arena=self.arena, reuse=self.reuse,
                          termination=self.termination)


def _read(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _output_relations(res: engine.Result) -> list:
    return res.queries or list(res.compiled.schemas)


def _emit_stats(path, payload):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path == "-":
        print(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _batch_samples(d):
    names = sorted(n for n in os.listdir(d) if os.path.isdir(os.path.join(d, n)))
    if not names:
        raise UsageError(f"batch directory {d} holds no sample directories")
    return names


def cmd_run(cfg: RunConfig) -> int:
    cfg.validate()
    text = _read(cfg.program)
    batched = bool(cfg.batch) and cfg.batching
    compiled = engine.compile_text(text, cfg.program, cfg.compile_options(), batched=batched)
    if cfg.dump_ram:
        print(ram.dump_program(compiled.ram), end="")
    if cfg.dump_apm:
        print(apm.print_program(compiled.apm), end="")
    schemas = compiled.schemas
    prov, ex = cfg.provenance_config(), cfg.exec_config()
    stats = []
    if cfg.batch:
        names = _batch_samples(cfg.batch)
        samples = [read_facts_dir(os.path.join(cfg.batch, n), schemas) for n in names]
        if batched:
            res = engine.run_batch_compiled(compiled, samples, prov, ex)
            stats.append(res.stats.to_dict())
            for k, n in enumerate(names):
                if cfg.out:
                    write_relations(res.db, os.path.join(cfg.out, n), _output_relations(res), sample=k)
        else:
            for n, facts in zip(names, samples):
                res = engine.run_compiled(compiled, facts, prov, ex)
                stats.append(res.stats.to_dict())
                if cfg.out:
                    write_relations(res.db, os.path.join(cfg.out, n), _output_relations(res))
    else:
        facts = read_facts_dir(cfg.facts, schemas) if cfg.facts else []
        res = engine.run_compiled(compiled, facts, prov, ex)
        stats.append(res.stats.to_dict())
        if cfg.out:
            write_relations(res.db, cfg.out, _output_relations(res))
    if cfg.stats:
        _emit_stats(cfg.stats, stats[0] if len(stats) == 1 else stats)
    return 0


def cmd_dump(program: str, stage: str, options: CompileOptions, batched: bool = False) -> str:
    compiled = engine.compile_text(_read(program), program, options, batched=batched)
    if stage == "ram":
        return ram.dump_program(apply_batching(compiled.ram) if batched else compiled.ram)
    return apm.print_program(compiled.apm)


def read_graph(path: str) -> list[tuple[int, int]]:
    """Edge list: two integers per line, whitespace separated; ``#`` starts a comment."""
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            toks = line.split()
            if len(toks) != 2:
                raise LoadError(f"{path}:{lineno}: expected two node ids, got {len(toks)} fields")
            try:
                edges.append((int(toks[0]), int(toks[1])))
            except ValueError:
                raise LoadError(f"{path}:{lineno}: node ids must be integers") from None
    return edges


def cmd_bench(suite: str, graph: str, exec_cfg: ExecConfig | None = None) -> dict:
    text, rel = BENCH[suite]
    edges = read_graph(graph)
    t0 = time.perf_counter()
    res = engine.run(text, [("edge", e) for e in edges], "unit", exec_cfg, source=f"<{suite}>")
    wall = time.perf_counter() - t0
    return {
        "suite": suite,
        "edges": len(edges),
        "result_size": len(res.db.get(rel, "stable")),
        "iterations": res.stats.total_iterations,
        "wall_s": wall,
        "peak_rss_kb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss,
    }


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apmdl", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def passes(sp):
        sp.add_argument("--no-static-regs", dest="static_regs", action="store_false",
                        help="rebuild loop-invariant hash indexes every iteration")
        sp.add_argument("--diff-delta", action="store_true", help="drop known tuples from delta before sorting")
        sp.add_argument("--no-batching", dest="batching", action="store_false",
                        help="run batch samples one at a time")

    r = sub.add_parser("run", help="evaluate a program")
    r.add_argument("program")
    r.add_argument("--facts", help="directory of <relation>.facts files")
    r.add_argument("--batch", help="directory of per-sample facts directories")
    r.add_argument("--provenance", default="unit", choices=KINDS)
    r.add_argument("--proof-cap", type=int)
    r.add_argument("--epsilon", type=float, default=0.0, help="saturation tolerance")
    r.add_argument("--termination", default="saturation", choices=TERMINATIONS)
    r.add_argument("--occupancy", type=float, default=2.0, help="hash table slots per key")
    r.add_argument("--threads", type=int, default=default_threads())
    r.add_argument("--no-arena", dest="arena", action="store_false")
    r.add_argument("--no-reuse", dest="reuse", action="store_false")
    r.add_argument("--out", help="output directory for <relation>.tsv files")
    r.add_argument("--stats", help="write execution stats as JSON ('-' for stdout)")
    r.add_argument("--dump-ram", action="store_true")
    r.add_argument("--dump-apm", action="store_true")
    passes(r)

    d = sub.add_parser("dump", help="print the planned or compiled program")
    d.add_argument("program")
    d.add_argument("--stage", choices=("ram", "apm"), default="apm")
    d.add_argument("--batched", action="store_true", help="show the sample-id lowering")
    passes(d)

    b = sub.add_parser("bench", help="time a graph workload")
    b.add_argument("suite", choices=sorted(BENCH))
    b.add_argument("graph", help="edge list file")
    b.add_argument("--threads", type=int, default=default_threads())
    b.add_argument("--occupancy", type=float, default=2.0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "run":
            cfg = RunConfig(**{k: v for k, v in vars(args).items() if k != "cmd"})
            return cmd_run(cfg)
        if args.cmd == "dump":
            opts = CompileOptions(diff_delta=args.diff_delta, static_regs=args.static_regs)
            sys.stdout.write(cmd_dump(args.program, args.stage, opts, args.batched))
            return 0
        if not os.path.exists(args.graph):
            raise UsageError(f"graph file not found: {args.graph}")
        report = cmd_bench(args.suite, args.graph, ExecConfig(threads=args.threads, occupancy=args.occupancy))
        print(json.dumps(report, sort_keys=True))
        return 0
    except (UsageError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SyntaxErr, PlanError, ram.RamError, LoadError, ProvenanceError, ExecError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
