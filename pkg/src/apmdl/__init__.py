"""Datalog with provenance, compiled to a vector-register machine."""

from .db import Database, dump_relation, load_batch, load_edb
from .engine import compile_text, run, run_batch
from .provenance import ProvenanceConfig
from .runtime import ExecConfig, execute

__version__ = "0.1.0"

__all__ = ["Database", "ExecConfig", "ProvenanceConfig", "compile_text", "dump_relation", "execute",
           "load_batch", "load_edb", "run", "run_batch"]
