"""Stack-machine evaluator for projection and selection lambdas.

A lambda whose outputs are all plain columns takes the copy path: each output is
a straight columnar copy.  Anything else compiles to postfix bytecode that is
run over a block of rows at once; every stack slot holds one vector per row
block, so rows stay independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..columnar import VALUE_DTYPES
from ..ram import BinOp, Col, Const, Lambda, Not

MAX_STACK = 32

# opcodes
LOAD, CONST, ADD, SUB, MUL, DIV, EQ, NE, LT, LE, GT, GE, AND, OR, NOT, EMIT = range(16)
_BIN = {"+": ADD, "-": SUB, "*": MUL, "/": DIV, "==": EQ, "!=": NE, "<": LT, "<=": LE, ">": GT, ">=": GE,
        "and": AND, "or": OR}
OPNAMES = ["LoadColumn", "Const", "Add", "Sub", "Mul", "Div", "Eq", "Ne", "Lt", "Le", "Gt", "Ge", "And", "Or",
           "Not", "EmitOutput"]


class StackOverflow(ValueError):
    pass


@dataclass
class Bytecode:
    ops: list  # (opcode, arg)
    n_outputs: int
    max_depth: int
    column_map: list | None = None  # copy path when not None

    def listing(self) -> list[str]:
        return [f"{OPNAMES[o]}" + ("" if a is None else f" {a!r}") for o, a in self.ops]


def compile_lambda(fn: Lambda, symbols=None, cap: int = MAX_STACK) -> Bytecode:
    """Compile ``fn``; string constants are interned through ``symbols`` (a callable)."""
    ops: list = []
    depth = 0
    best = 0

    def push(n=1):
        nonlocal depth, best
        depth += n
        best = max(best, depth)

    def emit(e):
        nonlocal depth
        if isinstance(e, Col):
            ops.append((LOAD, e.index))
            push()
        elif isinstance(e, Const):
            v = e.value
            if e.kind == "sym":
                if symbols is None:
                    raise ValueError("symbol constant needs a symbol table")
                v = symbols(v)
            ops.append((CONST, v))
            push()
        elif isinstance(e, Not):
            emit(e.arg)
            ops.append((NOT, None))
        else:
            emit(e.left)
            emit(e.right)
            ops.append((_BIN[e.op], None))
            depth -= 1

    for k, o in enumerate(fn.outputs):
        emit(o)
        ops.append((EMIT, k))
        depth -= 1
    if best > cap:
        raise StackOverflow(f"expression needs stack depth {best}, limit is {cap}")
    return Bytecode(ops, len(fn.outputs), best, fn.column_map())


def _as_compute(col: np.ndarray) -> np.ndarray:
    if col.dtype == np.float64 or col.dtype == np.bool_:
        return col
    return col.astype(np.int64, copy=False)


def run(bc: Bytecode, cols, n: int, out_dtypes):
    """Evaluate over ``n`` rows.  Returns ``(outputs, ok)``; ``ok`` is None unless
    some row divided by zero."""
    if bc.column_map is not None:
        return [np.asarray(cols[i], dtype=d) for i, d in zip(bc.column_map, out_dtypes)], None
    stack: list = []
    outs: list = [None] * bc.n_outputs
    ok = None
    for op, arg in bc.ops:
        if op == LOAD:
            stack.append(_as_compute(cols[arg][:n]))
        elif op == CONST:
            stack.append(np.full(n, arg, dtype=np.float64 if isinstance(arg, float) else
                                 (np.bool_ if isinstance(arg, bool) else np.int64)))
        elif op == NOT:
            stack.append(~stack.pop().astype(bool))
        elif op == EMIT:
            outs[arg] = stack.pop()
        else:
            b = stack.pop()
            a = stack.pop()
            if op == ADD:
                r = a + b
            elif op == SUB:
                r = a - b
            elif op == MUL:
                r = a * b
            elif op == DIV:
                zero = b == 0
                if zero.any():
                    ok = ~zero if ok is None else ok & ~zero
                    b = np.where(zero, 1, b)
                if a.dtype == np.float64 or b.dtype == np.float64:
                    r = a / b
                else:
                    q = np.abs(a) // np.abs(b)
                    r = np.where((a >= 0) == (b >= 0), q, -q)
            elif op == EQ:
                r = a == b
            elif op == NE:
                r = a != b
            elif op == LT:
                r = a < b
            elif op == LE:
                r = a <= b
            elif op == GT:
                r = a > b
            elif op == GE:
                r = a >= b
            elif op == AND:
                r = a.astype(bool) & b.astype(bool)
            else:
                r = a.astype(bool) | b.astype(bool)
            stack.append(r)
    res = []
    for o, d in zip(outs, out_dtypes):
        res.append(np.asarray(o, dtype=d) if o.dtype != d else o)
    return res, ok


def out_dtypes(kinds) -> list:
    return [np.dtype(bool) if k in ("bool", "mask") else VALUE_DTYPES[k] for k in kinds]
