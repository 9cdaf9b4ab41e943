"""Columnar fact storage with stable/recent/delta partitions.

Every relation owns three tables.  ``recent`` holds the frontier the next
iteration joins against, ``stable`` the settled facts, ``delta`` the raw output
of the current iteration.  Input facts start in ``recent`` so that the first
iteration sees them as new.

When a database is batched, column 0 of every table is the sample id (``u8``)
and :class:`FactRegistry` remembers which sample each input fact came from.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .columnar import VALUE_DTYPES, lex_order, match_sorted, order_keys, row_change
from .provenance import ProvenanceConfig, Semiring, make_semiring

PARTS = ("stable", "recent", "delta")
MAX_SAMPLES = 256


class LoadError(ValueError):
    """A fact does not fit its relation's schema."""


class RangeError(LoadError):
    """A probability outside [0, 1]."""


class SymbolTable:
    def __init__(self):
        self._ids: dict[str, int] = {}
        self._names: list[str] = []

    def intern(self, s: str) -> int:
        i = self._ids.get(s)
        if i is None:
            i = len(self._names)
            self._ids[s] = i
            self._names.append(s)
        return i

    def lookup(self, i: int) -> str:
        return self._names[i]

    def __len__(self):
        return len(self._names)

    def __contains__(self, s):
        return s in self._ids


@dataclass
class Table:
    columns: list
    tags: np.ndarray

    @property
    def arity(self) -> int:
        return len(self.columns)

    def __len__(self):
        return len(self.tags)

    @classmethod
    def empty(cls, kinds, sr: Semiring) -> "Table":
        return cls([np.zeros(0, dtype=VALUE_DTYPES[k]) for k in kinds], sr.zeros(0))

    def take(self, idx) -> "Table":
        return Table([c[idx] for c in self.columns], self.tags[idx])

    def keys(self):
        return order_keys(self.columns)

    def rows(self):
        return list(zip(*[c.tolist() for c in self.columns])) if self.columns else [()] * len(self)


def concat_tables(tables, kinds, sr) -> Table:
    tables = [t for t in tables if len(t)]
    if not tables:
        return Table.empty(kinds, sr)
    if len(tables) == 1:
        return tables[0]
    cols = [np.concatenate([t.columns[i] for t in tables]) for i in range(len(kinds))]
    return Table(cols, np.concatenate([t.tags for t in tables]))


def sort_unique(t: Table, sr: Semiring) -> Table:
    """Sort by tuple and fold tags of equal tuples with ``oplus``."""
    n = len(t)
    if n == 0:
        return t
    keys = t.keys()
    order = lex_order(keys, n)
    keys = [k[order] for k in keys]
    starts = np.flatnonzero(row_change(keys, n))
    tags = t.tags[order]
    reduced = tags[starts] if len(starts) == n else sr.reduce(tags, starts)
    return Table([c[order][starts] for c in t.columns], reduced)


def merge_unique(a: Table, b: Table, sr: Semiring) -> Table:
    """Merge two sorted duplicate-free tables, combining shared tuples with ``oplus``."""
    if not len(a):
        return b
    if not len(b):
        return a
    both = Table([np.concatenate([x, y]) for x, y in zip(a.columns, b.columns)], np.concatenate([a.tags, b.tags]))
    return sort_unique(both, sr)


@dataclass
class FactRecord:
    relation: str
    values: tuple
    prob: float
    group: int | None
    sample: int = 0


class FactRegistry:
    """Dense fact ids for input facts, in load order."""

    def __init__(self):
        self.records: list[FactRecord] = []
        self.sample_offsets: list[int] = [0]

    def add(self, rec: FactRecord) -> int:
        self.records.append(rec)
        return len(self.records) - 1

    def __len__(self):
        return len(self.records)

    @property
    def probs(self):
        return np.array([r.prob for r in self.records], dtype=np.float64)

    def groups(self):
        """Exclusion groups, remapped so that groups never span samples."""
        ids = {}
        out = np.full(len(self.records), -1, dtype=np.int64)
        for i, r in enumerate(self.records):
            if r.group is not None:
                out[i] = ids.setdefault((r.sample, r.group), len(ids))
        return out

    def local_id(self, fid: int) -> int:
        s = self.records[fid].sample
        return fid - self.sample_offsets[s]


class Database:
    def __init__(self, schemas: dict, cfg: ProvenanceConfig | None = None, batched: bool = False):
        self.cfg = cfg or ProvenanceConfig()
        self.batched = batched
        self.declared = {r: tuple(k) for r, k in schemas.items()}
        self.schemas = {r: (("u8",) if batched else ()) + tuple(k) for r, k in schemas.items()}
        self.symbols = SymbolTable()
        self.registry = FactRegistry()
        self.num_samples = 1
        self.semiring = make_semiring(self.cfg)
        self.parts: dict[str, dict[str, Table]] = {}
        for r in self.schemas:
            self._init_relation(r)

    def _init_relation(self, rel):
        self.parts[rel] = {p: Table.empty(self.schemas[rel], self.semiring) for p in PARTS}

    def add_relation(self, rel, kinds):
        if rel in self.schemas:
            return
        self.declared[rel] = tuple(kinds)
        self.schemas[rel] = (("u8",) if self.batched else ()) + tuple(kinds)
        self._init_relation(rel)

    def relations(self):
        return list(self.schemas)

    def get(self, rel: str, part: str) -> Table:
        try:
            return self.parts[rel][part]
        except KeyError:
            raise KeyError(f"unknown relation {rel!r}") from None

    def put(self, rel: str, part: str, t: Table):
        self.parts[rel][part] = t

    def clear(self, rel: str, part: str):
        self.parts[rel][part] = Table.empty(self.schemas[rel], self.semiring)

    def decode(self, kind, v):
        if kind == "sym":
            return self.symbols.lookup(int(v))
        if kind == "f64":
            return float(v)
        return int(v)

    def encode(self, kind, v):
        if kind == "sym":
            if not isinstance(v, str):
                raise TypeError("symbol expected")
            return self.symbols.intern(v)
        if kind == "f64":
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise TypeError("number expected")
            return float(v)
        if isinstance(v, bool) or not isinstance(v, int):
            raise TypeError("integer expected")
        if kind == "u8" and not 0 <= v < 256:
            raise TypeError("u8 out of range")
        return v

    def fact_label(self, fid: int):
        return self.registry.local_id(fid) if self.batched else fid


def _norm_fact(f):
    if len(f) == 2:
        return f[0], tuple(f[1]), None, None
    if len(f) == 3:
        return f[0], tuple(f[1]), f[2], None
    return f[0], tuple(f[1]), f[2], f[3]


def load_edb(facts, schemas: dict, cfg: ProvenanceConfig | None = None, db: Database | None = None) -> Database:
    """Build a database whose ``recent`` partitions hold ``facts``.

    ``facts`` is a list of ``(relation, tuple[, payload[, group]])``.
    """
    return load_batch([facts], schemas, cfg, batched=False, db=db)


def load_batch(samples, schemas: dict, cfg: ProvenanceConfig | None = None, batched: bool = True, db=None) -> Database:
    """Load several fact lists into one database tagged by sample id."""
    if len(samples) > MAX_SAMPLES:
        raise LoadError(f"batch of {len(samples)} exceeds {MAX_SAMPLES} samples")
    db = db or Database(schemas, cfg, batched=batched)
    cfg = db.cfg
    unit = cfg.kind == "unit"
    rows: dict[str, list] = {r: [] for r in db.schemas}
    fids: dict[str, list] = {r: [] for r in db.schemas}
    db.registry.sample_offsets = []
    for s, facts in enumerate(samples):
        db.registry.sample_offsets.append(len(db.registry))
        for rowno, f in enumerate(facts):
            rel, vals, payload, group = _norm_fact(f)
            if rel not in db.declared:
                raise LoadError(f"{rel}: unknown relation (fact {rowno})")
            kinds = db.declared[rel]
            if len(vals) != len(kinds):
                raise LoadError(f"{rel}: fact {rowno} has arity {len(vals)}, schema expects {len(kinds)}")
            try:
                enc = tuple(db.encode(k, v) for k, v in zip(kinds, vals))
            except TypeError as e:
                raise LoadError(f"{rel}: fact {rowno} {vals!r}: {e}") from None
            if payload is not None:
                if isinstance(payload, bool) or not isinstance(payload, (int, float)):
                    raise LoadError(f"{rel}: fact {rowno} has non-numeric probability {payload!r}")
                if not (0.0 <= payload <= 1.0) or math.isnan(payload):
                    raise RangeError(f"{rel}: fact {rowno} probability {payload} outside [0, 1]")
            prob = 1.0 if (payload is None or unit) else float(payload)
            fid = db.registry.add(FactRecord(rel, tuple(vals), prob, group, s))
            rows[rel].append(((s,) if db.batched else ()) + enc)
            fids[rel].append(fid)
    db.num_samples = max(1, len(samples))
    db.semiring = make_semiring(cfg, db.registry.probs, db.registry.groups())
    for rel, kinds in db.schemas.items():
        if not rows[rel]:
            for p in PARTS:
                db.clear(rel, p)
            continue
        cols = [np.array([r[i] for r in rows[rel]], dtype=VALUE_DTYPES[k]) for i, k in enumerate(kinds)]
        tags = db.semiring.inputs(np.array(fids[rel], dtype=np.int64))
        db.put(rel, "recent", sort_unique(Table(cols, tags), db.semiring))
        db.clear(rel, "stable")
        db.clear(rel, "delta")
    return db


def promote_partitions(db: Database, rel: str) -> Database:
    """stable := stable merged with recent; recent := delta; delta := empty."""
    sr = db.semiring
    st, rc, dl = (db.get(rel, p) for p in PARTS)
    db.put(rel, "stable", merge_unique(st, rc, sr))
    db.put(rel, "recent", dl)
    db.clear(rel, "delta")
    return db


def settle(db: Database, rel: str) -> Database:
    """Fold every partition into stable."""
    promote_partitions(db, rel)
    return promote_partitions(db, rel)


def distinct_count(db: Database, rel: str) -> int:
    st, rc = db.get(rel, "stable"), db.get(rel, "recent")
    if not len(rc):
        return len(st)
    hit = match_sorted(st.keys(), len(st), rc.keys(), len(rc))
    return len(st) + int((hit < 0).sum())


def total_fact_count(db: Database, relations=None) -> int:
    """Distinct tuples in stable and recent over ``relations`` (default all)."""
    rels = db.relations() if relations is None else relations
    return sum(distinct_count(db, r) for r in rels)


def _merged_view(db: Database, rel: str) -> Table:
    st, rc = db.get(rel, "stable"), db.get(rel, "recent")
    if not len(rc):
        return st
    return merge_unique(st, rc, db.semiring)


def dump_relation(db: Database, rel: str, sample: int | None = None):
    """Rows of ``rel`` as ``(tuple, ReadOut)`` in value order.

    For batched databases pass ``sample`` to get that sample's rows (without
    the sample column); fact ids in the read-out are then sample-local.
    """
    if rel not in db.schemas:
        raise KeyError(f"unknown relation {rel!r}")
    t = _merged_view(db, rel)
    sr = db.semiring
    kinds = db.declared[rel]
    cols = t.columns
    if db.batched:
        sel = np.arange(len(t)) if sample is None else np.flatnonzero(cols[0] == sample)
        cols = [c[sel] for c in cols[1:]]
        tags = t.tags[sel]
    else:
        tags = t.tags
    keep = ~sr.is_zero(tags)
    out = []
    for i in np.flatnonzero(keep):
        vals = tuple(db.decode(k, c[i]) for k, c in zip(kinds, cols))
        out.append((vals, _relabel(sr.read_out(tags[i : i + 1]), db)))
    out.sort(key=lambda r: _sort_key(r[0]))
    return out


def _sort_key(vals):
    return tuple((0, v) if not isinstance(v, str) else (1, v) for v in vals)


def _relabel(ro, db):
    if not db.batched:
        return ro
    if ro.proof is not None:
        ro.proof = tuple(db.registry.local_id(i) for i in ro.proof)
    if ro.gradient is not None:
        ro.gradient = {db.registry.local_id(i): v for i, v in ro.gradient.items()}
    return ro


# -- fact files --------------------------------------------------------------

def _parse_value(tok: str, kind: str):
    if kind == "sym":
        if len(tok) >= 2 and tok[0] == tok[-1] == '"':
            return tok[1:-1]
        return tok
    if kind == "f64":
        return float(tok)
    return int(tok)


def parse_fact_line(line: str, kinds, where="") -> tuple | None:
    """Parse one fact-file line into ``(values, prob, group)`` (None for blanks)."""
    line = line.rstrip("\n")
    if not line.strip() or line.lstrip().startswith("#"):
        return None
    toks = line.split("\t")
    group = None
    if toks and toks[-1].startswith("@g"):
        try:
            group = int(toks[-1][2:])
        except ValueError:
            raise LoadError(f"{where}: bad group token {toks[-1]!r}") from None
        toks = toks[:-1]
    prob = None
    if toks and toks[0].startswith("p="):
        prob, toks = toks[0][2:], toks[1:]
    elif len(toks) == len(kinds) + 1:
        prob, toks = toks[0], toks[1:]
    if prob is not None:
        try:
            prob = float(prob)
        except ValueError:
            raise LoadError(f"{where}: bad probability {prob!r}") from None
    if len(toks) != len(kinds):
        raise LoadError(f"{where}: expected {len(kinds)} columns, got {len(toks)}")
    try:
        vals = tuple(_parse_value(t, k) for t, k in zip(toks, kinds))
    except ValueError as e:
        raise LoadError(f"{where}: {e}") from None
    return vals, prob, group


def read_facts_dir(path: str, schemas: dict) -> list:
    """Read ``<relation>.facts`` files from ``path`` for every declared relation."""
    if not os.path.isdir(path):
        raise FileNotFoundError(f"facts directory not found: {path}")
    facts = []
    for rel, kinds in schemas.items():
        fn = os.path.join(path, f"{rel}.facts")
        if not os.path.exists(fn):
            continue
        with open(fn, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parsed = parse_fact_line(line, kinds, f"{fn}:{lineno}")
                if parsed is not None:
                    vals, prob, group = parsed
                    facts.append((rel, vals, prob, group))
    return facts


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_row(db: Database, vals, ro) -> str:
    fields = []
    if ro.probability is not None:
        fields.append(f"p={ro.probability!r}")
    fields.extend(format_value(v) for v in vals)
    if ro.proof is not None:
        fields.append("proof=[" + ",".join(str(i) for i in ro.proof) + "]")
    if ro.gradient is not None:
        fields.append("grad={" + ",".join(f"{k}:{ro.gradient[k]!r}" for k in sorted(ro.gradient)) + "}")
    return "\t".join(fields)


def write_relations(db: Database, outdir: str, relations=None, sample: int | None = None):
    os.makedirs(outdir, exist_ok=True)
    for rel in relations or db.relations():
        with open(os.path.join(outdir, f"{rel}.tsv"), "w", encoding="utf-8") as fh:
            for vals, ro in dump_relation(db, rel, sample):
                fh.write(format_row(db, vals, ro) + "\n")
