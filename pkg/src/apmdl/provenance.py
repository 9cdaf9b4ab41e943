"""Provenance semirings over fixed-width tag vectors.

A tag column is a numpy structured array whose dtype is fixed per semiring
(and per database, for the kinds whose payload is bounded by the number of
input facts).  All operations are elementwise over tag columns; a scalar tag is
simply a length-1 column.

Seven kinds are available::

    unit                 booleans, or / and
    max-min-prob         p, max / min
    add-mult-prob        p, + / *  (unclamped; clamped only by read_out)
    top-1-proof          one conflict-free proof (sorted fact ids) + its probability
    diff-max-min-prob    p + sparse gradient, argmax / argmin
    diff-add-mult-prob   p + sparse gradient, sum rule / product rule
    diff-top-1-proofs    as top-1-proof, gradient derived from the proof at read-out
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

KINDS = (
    "unit",
    "max-min-prob",
    "add-mult-prob",
    "top-1-proof",
    "diff-max-min-prob",
    "diff-add-mult-prob",
    "diff-top-1-proofs",
)
PROBABILISTIC = frozenset(KINDS) - {"unit"}
DIFFERENTIABLE = frozenset({"diff-max-min-prob", "diff-add-mult-prob", "diff-top-1-proofs"})
PROOF_KINDS = frozenset({"top-1-proof", "diff-top-1-proofs"})

_BIG = np.int64(np.iinfo(np.int32).max)


class ProvenanceError(ValueError):
    pass


@dataclass(frozen=True)
class ProvenanceConfig:
    kind: str = "unit"
    proof_cap: int = 300
    saturation_epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProvenanceError(f"unknown provenance {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.proof_cap < 1:
            raise ProvenanceError("proof_cap must be >= 1")
        if self.saturation_epsilon < 0:
            raise ProvenanceError("saturation_epsilon must be >= 0")


@dataclass
class ReadOut:
    probability: float | None = None
    gradient: dict[int, float] | None = None
    proof: tuple[int, ...] | None = None


def _clamp(p):
    return np.clip(p, 0.0, 1.0)


class Semiring:
    """Vectorised semiring over a structured tag dtype.

    ``fact_probs`` and ``fact_groups`` describe the input-fact registry; the
    proof kinds need them to price merged proofs and detect conflicts.
    """

    kind = "abstract"

    def __init__(self, cfg: ProvenanceConfig, fact_probs=(), fact_groups=None):
        self.cfg = cfg
        self.probs = np.asarray(fact_probs, dtype=np.float64)
        nfacts = len(self.probs)
        if fact_groups is None:
            self.groups = np.full(nfacts, -1, dtype=np.int64)
        else:
            self.groups = np.asarray(fact_groups, dtype=np.int64)
        self.has_groups = bool(np.any(self.groups >= 0))
        self.width = max(1, min(cfg.proof_cap, nfacts))
        self.dtype = self._dtype()
        self.stats = {"grad_entries_dropped": 0}

    # -- construction -------------------------------------------------------
    def _dtype(self) -> np.dtype:
        raise NotImplementedError

    @property
    def nbytes(self) -> int:
        return self.dtype.itemsize

    def zeros(self, n: int) -> np.ndarray:
        raise NotImplementedError

    def ones(self, n: int) -> np.ndarray:
        raise NotImplementedError

    def zero(self) -> np.ndarray:
        return self.zeros(1)

    def one(self) -> np.ndarray:
        return self.ones(1)

    def inputs(self, fact_ids) -> np.ndarray:
        raise NotImplementedError

    def tag_of_input(self, payload, fact_id: int) -> np.ndarray:
        """Tag for one input fact; ``payload`` is its probability (or None)."""
        check_payload(self.cfg.kind, payload)
        if payload is not None and fact_id < len(self.probs) and self.probs[fact_id] != float(payload):
            raise ProvenanceError(f"fact {fact_id} registered with probability {self.probs[fact_id]}, got {payload}")
        return self.inputs(np.array([fact_id]))

    # -- algebra ----------------------------------------------------------------
    def oplus(self, a, b):
        raise NotImplementedError

    def otimes(self, a, b):
        raise NotImplementedError

    def reduce(self, tags: np.ndarray, starts: np.ndarray) -> np.ndarray:
        """Fold ``oplus`` left to right over each segment ``[starts[i], starts[i+1])``."""
        raise NotImplementedError

    def saturated(self, old, new) -> np.ndarray:
        raise NotImplementedError

    def is_zero(self, tags) -> np.ndarray:
        """Rows that carry no derivation and are dropped from relations."""
        return np.zeros(len(tags), dtype=bool)

    # -- output -----------------------------------------------------------------
    def read_out(self, tag) -> ReadOut:
        raise NotImplementedError

    def render(self, tag, id_map=None) -> list[str]:
        out = self.read_out(tag)
        fields = []
        if out.probability is not None:
            fields.append(f"p={out.probability!r}")
        if out.proof is not None:
            ids = [id_map(i) if id_map else i for i in out.proof]
            fields.append("proof=[" + ",".join(str(i) for i in ids) + "]")
        if out.gradient is not None:
            items = sorted((id_map(i) if id_map else i, v) for i, v in out.gradient.items())
            fields.append("grad={" + ",".join(f"{i}:{v!r}" for i, v in items) + "}")
        return fields

    def serialize(self, tags) -> bytes:
        return np.ascontiguousarray(tags, dtype=self.dtype).tobytes()

    # helpers for selection-style semirings
    def _pick(self, a, b, take_b):
        out = a.copy()
        out[take_b] = b[take_b]
        return out

    def _segment_first_best(self, score, starts):
        n = len(score)
        seg = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, n)))
        best = np.maximum.reduceat(score, starts)
        idx = np.where(score == best[seg], np.arange(n), n)
        return np.minimum.reduceat(idx, starts)


def check_payload(kind: str, payload):
    if payload is None:
        return
    if kind == "unit":
        raise ProvenanceError("unit provenance takes no tag payload")
    if isinstance(payload, bool) or not isinstance(payload, (int, float, np.floating, np.integer)):
        raise ProvenanceError(f"probability payload expected, got {payload!r}")
    if not 0.0 <= float(payload) <= 1.0:
        raise ProvenanceError(f"probability {payload} outside [0, 1]")


class UnitSemiring(Semiring):
    kind = "unit"

    def _dtype(self):
        return np.dtype([("t", "?")])

    def zeros(self, n):
        return np.zeros(n, dtype=self.dtype)

    def ones(self, n):
        t = np.zeros(n, dtype=self.dtype)
        t["t"] = True
        return t

    def inputs(self, fact_ids):
        return self.ones(len(fact_ids))

    def oplus(self, a, b):
        out = np.empty(len(a), dtype=self.dtype)
        out["t"] = a["t"] | b["t"]
        return out

    def otimes(self, a, b):
        out = np.empty(len(a), dtype=self.dtype)
        out["t"] = a["t"] & b["t"]
        return out

    def reduce(self, tags, starts):
        out = np.empty(len(starts), dtype=self.dtype)
        if len(starts):
            out["t"] = np.logical_or.reduceat(tags["t"], starts)
        return out

    def saturated(self, old, new):
        return np.ones(len(old), dtype=bool)

    def read_out(self, tag):
        return ReadOut()


class _ProbSemiring(Semiring):
    def _dtype(self):
        return np.dtype([("p", "f8")])

    def zeros(self, n):
        return np.zeros(n, dtype=self.dtype)

    def ones(self, n):
        t = np.zeros(n, dtype=self.dtype)
        t["p"] = 1.0
        return t

    def inputs(self, fact_ids):
        t = np.empty(len(fact_ids), dtype=self.dtype)
        t["p"] = self.probs[np.asarray(fact_ids, dtype=np.int64)]
        return t

    def saturated(self, old, new):
        merged = self.oplus(old, new)
        return np.abs(_clamp(merged["p"]) - _clamp(old["p"])) <= self.cfg.saturation_epsilon

    def read_out(self, tag):
        return ReadOut(probability=float(_clamp(np.asarray(tag["p"]).reshape(-1)[0])))


class MaxMinProb(_ProbSemiring):
    kind = "max-min-prob"

    def oplus(self, a, b):
        return self._pick(a, b, b["p"] > a["p"])

    def otimes(self, a, b):
        return self._pick(a, b, b["p"] < a["p"])

    def reduce(self, tags, starts):
        out = np.empty(len(starts), dtype=self.dtype)
        if len(starts):
            out["p"] = np.maximum.reduceat(tags["p"], starts)
        return out


class AddMultProb(_ProbSemiring):
    kind = "add-mult-prob"

    def oplus(self, a, b):
        out = np.empty(len(a), dtype=self.dtype)
        out["p"] = a["p"] + b["p"]
        return out

    def otimes(self, a, b):
        out = np.empty(len(a), dtype=self.dtype)
        out["p"] = a["p"] * b["p"]
        return out

    def reduce(self, tags, starts):
        out = np.empty(len(starts), dtype=self.dtype)
        if len(starts):
            out["p"] = np.add.reduceat(tags["p"], starts)
        return out


class _DualSemiring(Semiring):
    """Probability plus a sparse gradient of at most ``width`` entries.

    Entries are kept sorted by fact id with -1 padding.  When a combination
    produces more than ``width`` distinct ids the smallest-magnitude entries are
    dropped and counted in ``stats``.
    """

    def _dtype(self):
        k = self.width
        return np.dtype([("p", "f8"), ("gid", "i4", (k,)), ("gval", "f8", (k,))])

    def zeros(self, n):
        t = np.zeros(n, dtype=self.dtype)
        t["gid"] = -1
        return t

    def ones(self, n):
        t = self.zeros(n)
        t["p"] = 1.0
        return t

    def inputs(self, fact_ids):
        ids = np.asarray(fact_ids, dtype=np.int64)
        t = self.zeros(len(ids))
        t["p"] = self.probs[ids]
        t["gid"][:, 0] = ids
        t["gval"][:, 0] = 1.0
        return t

    def _pack(self, rows, ids, vals, n):
        out = self.zeros(n)
        keep = vals != 0.0
        rows, ids, vals = rows[keep], ids[keep], vals[keep]
        if rows.size == 0:
            return out
        order = np.lexsort((ids, rows))
        rows, ids, vals = rows[order], ids[order], vals[order]
        new = np.ones(len(rows), dtype=bool)
        new[1:] = (rows[1:] != rows[:-1]) | (ids[1:] != ids[:-1])
        starts = np.flatnonzero(new)
        rows, ids, vals = rows[starts], ids[starts], np.add.reduceat(vals, starts)
        keep = vals != 0.0
        rows, ids, vals = rows[keep], ids[keep], vals[keep]
        rank = _rank_within(rows)
        if rank.size and rank.max() >= self.width:
            order = np.lexsort((ids, -np.abs(vals), rows))
            rows, ids, vals = rows[order], ids[order], vals[order]
            keep = _rank_within(rows) < self.width
            self.stats["grad_entries_dropped"] += int((~keep).sum())
            rows, ids, vals = rows[keep], ids[keep], vals[keep]
            order = np.lexsort((ids, rows))
            rows, ids, vals = rows[order], ids[order], vals[order]
            rank = _rank_within(rows)
        out["gid"][rows, rank] = ids
        out["gval"][rows, rank] = vals
        return out

    def _flat(self, tags, scale=None, rows=None):
        valid = tags["gid"] >= 0
        r, c = np.nonzero(valid)
        vals = tags["gval"][r, c]
        if scale is not None:
            vals = vals * scale[r]
        return (r if rows is None else rows[r]), tags["gid"][r, c].astype(np.int64), vals

    def saturated(self, old, new):
        merged = self.oplus(old, new)
        return np.abs(_clamp(merged["p"]) - _clamp(old["p"])) <= self.cfg.saturation_epsilon

    def read_out(self, tag):
        tag = np.asarray(tag).reshape(-1)[0]
        p = float(tag["p"])
        grad = {}
        if 0.0 <= p <= 1.0:
            for i, v in zip(tag["gid"], tag["gval"]):
                if i >= 0:
                    grad[int(i)] = float(v)
        return ReadOut(probability=float(_clamp(p)), gradient=grad)


def _rank_within(rows):
    """Position of each element inside its run of equal ``rows`` (rows sorted)."""
    n = len(rows)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    start = np.ones(n, dtype=bool)
    start[1:] = rows[1:] != rows[:-1]
    idx = np.flatnonzero(start)
    counts = np.diff(np.append(idx, n))
    return np.arange(n) - np.repeat(idx, counts)


class DiffMaxMinProb(_DualSemiring):
    kind = "diff-max-min-prob"

    def oplus(self, a, b):
        return self._pick(a, b, b["p"] > a["p"])

    def otimes(self, a, b):
        return self._pick(a, b, b["p"] < a["p"])

    def reduce(self, tags, starts):
        if not len(starts):
            return self.zeros(0)
        return tags[self._segment_first_best(tags["p"], starts)]


class DiffAddMultProb(_DualSemiring):
    kind = "diff-add-mult-prob"

    def oplus(self, a, b):
        n = len(a)
        ra, ia, va = self._flat(a)
        rb, ib, vb = self._flat(b)
        out = self._pack(np.concatenate([ra, rb]), np.concatenate([ia, ib]), np.concatenate([va, vb]), n)
        out["p"] = a["p"] + b["p"]
        return out

    def otimes(self, a, b):
        n = len(a)
        ra, ia, va = self._flat(a, scale=b["p"])
        rb, ib, vb = self._flat(b, scale=a["p"])
        out = self._pack(np.concatenate([ra, rb]), np.concatenate([ia, ib]), np.concatenate([va, vb]), n)
        out["p"] = a["p"] * b["p"]
        return out

    def reduce(self, tags, starts):
        nseg = len(starts)
        if not nseg:
            return self.zeros(0)
        seg = np.repeat(np.arange(nseg), np.diff(np.append(starts, len(tags))))
        r, i, v = self._flat(tags, rows=seg)
        out = self._pack(r, i, v, nseg)
        out["p"] = np.add.reduceat(tags["p"], starts)
        return out

    def saturated(self, old, new):
        # the increment is absorbed once ⊕ leaves both p and every gradient entry unchanged
        merged = self.oplus(old, new)
        eps = self.cfg.saturation_epsilon
        same_p = np.abs(_clamp(merged["p"]) - _clamp(old["p"])) <= eps
        mg, og = merged["gid"], old["gid"]
        match = (mg[:, :, None] == og[:, None, :]) & (mg[:, :, None] >= 0)
        old_at = np.where(match, old["gval"][:, None, :], 0.0).sum(axis=2)
        moved = np.where(mg >= 0, np.abs(merged["gval"] - old_at), 0.0).max(axis=1, initial=0.0)
        kept = match.any(axis=1)
        lost = np.where((og >= 0) & ~kept, np.abs(old["gval"]), 0.0).max(axis=1, initial=0.0)
        same_g = (np.maximum(moved, lost) <= eps) | (old["p"] >= 1.0)
        return same_p & same_g


class Top1Proof(Semiring):
    """One proof per tag: sorted fact ids (size ``n``; ``n == -1`` is the zero tag)."""

    kind = "top-1-proof"

    def _dtype(self):
        return np.dtype([("p", "f8"), ("n", "i4"), ("ids", "i4", (self.width,))])

    def zeros(self, n):
        t = np.zeros(n, dtype=self.dtype)
        t["n"] = -1
        t["ids"] = -1
        return t

    def ones(self, n):
        t = self.zeros(n)
        t["n"] = 0
        t["p"] = 1.0
        return t

    def inputs(self, fact_ids):
        ids = np.asarray(fact_ids, dtype=np.int64)
        t = self.zeros(len(ids))
        t["n"] = 1
        t["p"] = self.probs[ids]
        t["ids"][:, 0] = ids
        return t

    @staticmethod
    def _score(t):
        return np.where(t["n"] < 0, -1.0, t["p"])

    def oplus(self, a, b):
        return self._pick(a, b, self._score(b) > self._score(a))

    def otimes(self, a, b):
        n = len(a)
        out = self.zeros(n)
        if n == 0:
            return out
        ids = np.concatenate([a["ids"], b["ids"]], axis=1).astype(np.int64)
        ids[ids < 0] = _BIG
        ids.sort(axis=1)
        dup = np.zeros(ids.shape, dtype=bool)
        dup[:, 1:] = ids[:, 1:] == ids[:, :-1]
        ids[dup] = _BIG
        ids.sort(axis=1)
        valid = ids != _BIG
        size = valid.sum(axis=1)
        dead = (a["n"] < 0) | (b["n"] < 0) | (size > self.cfg.proof_cap)
        safe = np.where(valid, ids, 0)
        if self.has_groups:
            g = np.where(valid, self.groups[safe], -1)
            filler = -(np.arange(g.shape[1], dtype=np.int64) + 2)
            g = np.where(g >= 0, g, filler[None, :])
            g.sort(axis=1)
            dead |= np.any(g[:, 1:] == g[:, :-1], axis=1)
        k = self.width
        live = ~dead
        out["n"][live] = size[live]
        kept = np.where(valid[:, :k], ids[:, :k], -1)
        out["ids"][live] = kept[live]
        out["p"][live] = np.prod(np.where(valid, self.probs[safe], 1.0), axis=1)[live]
        return out

    def reduce(self, tags, starts):
        if not len(starts):
            return self.zeros(0)
        return tags[self._segment_first_best(self._score(tags), starts)]

    def saturated(self, old, new):
        return self._score(new) - self._score(old) <= self.cfg.saturation_epsilon

    def is_zero(self, tags):
        return tags["n"] < 0

    def proof_of(self, tag) -> tuple[int, ...] | None:
        tag = np.asarray(tag).reshape(-1)[0]
        if tag["n"] < 0:
            return None
        return tuple(int(i) for i in tag["ids"][: tag["n"]])

    def read_out(self, tag):
        tag = np.asarray(tag).reshape(-1)[0]
        proof = self.proof_of(tag)
        p = 0.0 if proof is None else float(tag["p"])
        return ReadOut(probability=p, proof=proof)


class DiffTop1Proofs(Top1Proof):
    kind = "diff-top-1-proofs"

    def read_out(self, tag):
        tag = np.asarray(tag).reshape(-1)[0]
        proof = self.proof_of(tag)
        if proof is None:
            return ReadOut(probability=0.0, proof=None, gradient={})
        probs = [float(self.probs[i]) for i in proof]
        grad = {}
        for j, f in enumerate(proof):
            grad[f] = float(math.prod(probs[:j] + probs[j + 1:]))
        return ReadOut(probability=float(tag["p"]), proof=proof, gradient=grad)


_CLASSES = {
    "unit": UnitSemiring,
    "max-min-prob": MaxMinProb,
    "add-mult-prob": AddMultProb,
    "top-1-proof": Top1Proof,
    "diff-max-min-prob": DiffMaxMinProb,
    "diff-add-mult-prob": DiffAddMultProb,
    "diff-top-1-proofs": DiffTop1Proofs,
}


def make_semiring(cfg: ProvenanceConfig | str, fact_probs=(), fact_groups=None) -> Semiring:
    if isinstance(cfg, str):
        cfg = ProvenanceConfig(kind=cfg)
    return _CLASSES[cfg.kind](cfg, fact_probs, fact_groups)


def tags_equal(sr: Semiring, a, b, rel=0.0) -> bool:
    """Semantic equality of two tag columns (gradient entries compared as maps)."""
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        ra, rb = sr.read_out(x), sr.read_out(y)
        if ra.proof != rb.proof:
            return False
        if not _close(ra.probability, rb.probability, rel):
            return False
        ga, gb = ra.gradient or {}, rb.gradient or {}
        if set(ga) != set(gb) or any(not _close(ga[k], gb[k], rel) for k in ga):
            return False
    if sr.kind == "unit":
        return bool(np.array_equal(a["t"], b["t"]))
    if sr.kind in ("max-min-prob", "add-mult-prob", "diff-max-min-prob", "diff-add-mult-prob"):
        return bool(np.allclose(a["p"], b["p"], rtol=rel, atol=0.0))
    return True


def _close(x, y, rel):
    if x is None or y is None:
        return x is y
    return abs(x - y) <= rel * max(abs(x), abs(y)) or x == y
