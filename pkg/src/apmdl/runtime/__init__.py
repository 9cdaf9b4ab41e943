"""Execution of compiled programs: kernels, memory, hash index and the fixpoint driver."""

from .interpreter import ExecConfig, ExecError, ExecStats, FixpointError, Interpreter, execute

__all__ = ["ExecConfig", "ExecError", "ExecStats", "FixpointError", "Interpreter", "execute"]
