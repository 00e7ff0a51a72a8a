"""Reading and writing observation grids, id-hash sampling, shuffling and synthetic data.

Column roles come from a small JSON schema::

    {
      "columns": {
        "loanId": {"role": "loan_id"},
        "month": {"role": "month"},
        "fico": {"role": "regressor", "kind": "REAL"},
        "channel": {"role": "regressor", "kind": "CATEGORICAL", "levels": ["R", "B", "C"]},
        "startStatus": {"role": "start_status"},
        "endStatus": {"role": "end_status"}
      },
      "status_space": {"states": [...], "reachable": {...}, "absorbing": [...]}
    }

Regressors keep the order they have in the schema. ``status_space`` is
optional; without it the states are the distinct statuses seen in the file.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import EmptyGrid, InputError, ParseError, SchemaMismatch
from .likelihood import row_neg_ll, score_matrix, softmax
from .model import ItemModel, ObservationGrid, RegressorKind, RegressorMeta, StatusSpace


class Role(str, enum.Enum):
    LOAN_ID = "loan_id"
    MONTH = "month"
    REGRESSOR = "regressor"
    START_STATUS = "start_status"
    END_STATUS = "end_status"


@dataclass(frozen=True)
class ColumnSpec:
    role: Role
    kind: RegressorKind | None = None
    levels: tuple[str, ...] = ()
    curve_eligible: bool | None = None


@dataclass(frozen=True)
class ColumnSchema:
    columns: Mapping[str, ColumnSpec]
    status_space: StatusSpace | None = None

    def __post_init__(self):
        cols = {str(k): v for k, v in dict(self.columns).items()}
        for role in (Role.START_STATUS, Role.END_STATUS):
            n = sum(1 for c in cols.values() if c.role is role)
            if n != 1:
                raise InputError(f"schema needs exactly one {role.value} column, found {n}")
        for role in (Role.LOAN_ID, Role.MONTH):
            if sum(1 for c in cols.values() if c.role is role) > 1:
                raise InputError(f"schema has more than one {role.value} column")
        object.__setattr__(self, "columns", cols)

    def column_for(self, role: Role) -> str | None:
        for name, c in self.columns.items():
            if c.role is role:
                return name
        return None

    @property
    def regressors(self) -> tuple[RegressorMeta, ...]:
        return tuple(
            RegressorMeta(name, c.kind or RegressorKind.REAL, c.levels, c.curve_eligible)
            for name, c in self.columns.items()
            if c.role is Role.REGRESSOR
        )

    def to_dict(self) -> dict:
        cols = {}
        for name, c in self.columns.items():
            d = {"role": c.role.value}
            if c.role is Role.REGRESSOR:
                d["kind"] = (c.kind or RegressorKind.REAL).value
                if c.levels:
                    d["levels"] = list(c.levels)
                if c.curve_eligible is not None:
                    d["curve_eligible"] = c.curve_eligible
            cols[name] = d
        out = {"columns": cols}
        if self.status_space is not None:
            out["status_space"] = self.status_space.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "ColumnSchema":
        try:
            cols = {}
            for name, c in d["columns"].items():
                role = Role(c["role"])
                kind = RegressorKind(c.get("kind", "REAL")) if role is Role.REGRESSOR else None
                cols[name] = ColumnSpec(role, kind, tuple(c.get("levels", ())), c.get("curve_eligible"))
            space = StatusSpace.from_dict(d["status_space"]) if d.get("status_space") else None
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad schema: {exc}") from None
        return cls(cols, space)

    @classmethod
    def for_grid(cls, grid: ObservationGrid) -> "ColumnSchema":
        """The schema :func:`write_csv` uses for ``grid``."""
        cols = {}
        if grid.loan_ids is not None:
            cols["loan_id"] = ColumnSpec(Role.LOAN_ID)
        if grid.months is not None:
            cols["month"] = ColumnSpec(Role.MONTH)
        for m in grid.meta:
            cols[m.name] = ColumnSpec(Role.REGRESSOR, m.kind, m.levels, m.curve_eligible)
        cols["start_status"] = ColumnSpec(Role.START_STATUS)
        cols["end_status"] = ColumnSpec(Role.END_STATUS)
        return cls(cols, grid.status_space)


def load_schema(path) -> ColumnSchema:
    try:
        return ColumnSchema.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from None


def save_schema(schema: ColumnSchema, path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------- #
# CSV
# --------------------------------------------------------------------------- #


def _parse_value(text: str, meta: RegressorMeta, line: int) -> float:
    if meta.kind is RegressorKind.CATEGORICAL:
        if text in meta.levels:
            return float(meta.levels.index(text))
        raise ParseError(line, f"{meta.name}: unknown level {text!r}")
    try:
        v = float(text)
    except ValueError:
        raise ParseError(line, f"{meta.name}: {text!r} is not a number") from None
    if not math.isfinite(v):
        raise ParseError(line, f"{meta.name}: {text!r} is not finite")
    if meta.kind is RegressorKind.FLAG and v not in (0.0, 1.0):
        raise ParseError(line, f"{meta.name}: flag value {text!r} is not 0 or 1")
    return v


def load_csv(path, schema: ColumnSchema) -> ObservationGrid:
    """Read a grid; end statuses become one-hot targets."""
    meta = schema.regressors
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyGrid(f"{path}: file is empty") from None
        missing = [c for c in schema.columns if c not in header]
        if missing:
            raise SchemaMismatch(f"{path}: missing columns {missing}")
        pos = {name: header.index(name) for name in schema.columns}
        reg_pos = [pos[m.name] for m in meta]
        id_col = schema.column_for(Role.LOAN_ID)
        month_col = schema.column_for(Role.MONTH)
        start_pos = pos[schema.column_for(Role.START_STATUS)]
        end_pos = pos[schema.column_for(Role.END_STATUS)]
        rows, starts, ends, ids, months = [], [], [], [], []
        for rec in reader:
            line = reader.line_num
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if len(rec) != len(header):
                raise ParseError(line, f"expected {len(header)} fields, got {len(rec)}")
            rows.append([_parse_value(rec[p], m, line) for p, m in zip(reg_pos, meta)])
            starts.append(rec[start_pos])
            ends.append(rec[end_pos])
            if schema.status_space is not None:
                for s in (rec[start_pos], rec[end_pos]):
                    if s not in schema.status_space.states:
                        raise ParseError(line, f"unknown status {s!r}")
            if id_col is not None:
                ids.append(rec[pos[id_col]])
            if month_col is not None:
                months.append(rec[pos[month_col]])
    if not rows:
        raise EmptyGrid(f"{path}: no data rows")
    if schema.status_space is not None:
        states = schema.status_space.states
    else:
        states = tuple(dict.fromkeys(starts + ends))
    x = np.array(rows, dtype=np.float64).reshape(len(rows), len(meta))
    return ObservationGrid.from_labels(
        meta, x, starts, ends, states,
        loan_ids=np.array(ids) if id_col is not None else None,
        months=np.array(months) if month_col is not None else None,
        status_space=schema.status_space,
    )


def _format_value(v: float, meta: RegressorMeta) -> str:
    if meta.kind is RegressorKind.CATEGORICAL:
        return meta.levels[int(v)]
    if meta.kind is RegressorKind.FLAG:
        return str(int(v))
    return repr(float(v))


def write_csv(grid: ObservationGrid, path, schema: ColumnSchema | None = None) -> ColumnSchema:
    """Write ``grid`` so that ``load_csv(path, schema)`` gives it back; returns the schema."""
    schema = schema or ColumnSchema.for_grid(grid)
    header = list(schema.columns)
    k_of = {m.name: k for k, m in enumerate(grid.meta)}
    start = grid.start_status
    end = grid.end_status
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(grid.n_rows):
            rec = []
            for name in header:
                role = schema.columns[name].role
                if role is Role.REGRESSOR:
                    k = k_of[name]
                    rec.append(_format_value(grid.x[i, k], grid.meta[k]))
                elif role is Role.LOAN_ID:
                    rec.append(grid.loan_ids[i])
                elif role is Role.MONTH:
                    rec.append(grid.months[i])
                elif role is Role.START_STATUS:
                    rec.append(start[i])
                else:
                    rec.append(end[i])
            w.writerow(rec)
    return schema


# --------------------------------------------------------------------------- #
# Sampling and ordering
# --------------------------------------------------------------------------- #


def id_hash_residue(loan_id: str, modulus: int) -> int:
    """SHA-256 of the id's UTF-8 bytes, read as a big-endian integer, mod ``modulus``."""
    digest = hashlib.sha256(str(loan_id).encode("utf-8")).digest()
    return int.from_bytes(digest, "big") % modulus


def sample_by_id_hash(grid: ObservationGrid, modulus: int, residue: int) -> ObservationGrid:
    """Keep the rows whose loan id hashes to ``residue``; all of a loan's rows travel together."""
    if modulus < 1 or not 0 <= residue < modulus:
        raise InputError("need modulus >= 1 and 0 <= residue < modulus")
    if grid.loan_ids is None:
        raise InputError("grid has no loan ids")
    if modulus == 1:
        return grid
    memo: dict[str, int] = {}
    keep = np.empty(grid.n_rows, dtype=bool)
    for i, lid in enumerate(grid.loan_ids.tolist()):
        r = memo.get(lid)
        if r is None:
            r = memo[lid] = id_hash_residue(lid, modulus)
        keep[i] = r == residue
    return grid.take(np.flatnonzero(keep))


def shuffle(grid: ObservationGrid, seed) -> ObservationGrid:
    if grid.n_rows <= 1:
        return grid
    return grid.take(np.random.default_rng(seed).permutation(grid.n_rows))


# --------------------------------------------------------------------------- #
# Synthetic data
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SyntheticSpec:
    """Ground-truth model plus how to draw each regressor.

    ``distributions`` maps regressor name to ``("uniform", lo, hi)``,
    ``("normal", mean, sd)`` or ``("flag", p)``. Unlisted REAL columns are
    standard normal, unlisted FLAG columns are fair coins.
    """

    model: ItemModel
    n: int
    seed: int = 0
    distributions: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1:
            raise InputError("synthetic grid needs at least one row")
        names = self.model.regressor_names
        for name, dist in dict(self.distributions).items():
            if name not in names:
                raise InputError(f"distribution for unknown regressor {name!r}")
            if not dist or dist[0] not in ("uniform", "normal", "flag"):
                raise InputError(f"{name}: unknown distribution {dist!r}")
        for m in self.model.regressors:
            if m.kind is RegressorKind.CATEGORICAL:
                raise InputError("synthetic models take FLAG and REAL regressors only")


def _draw(rng: np.random.Generator, dist: tuple, n: int) -> np.ndarray:
    kind = dist[0]
    if kind == "uniform":
        return rng.uniform(dist[1], dist[2], n)
    if kind == "normal":
        return rng.normal(dist[1], dist[2], n)
    return (rng.random(n) < dist[1]).astype(np.float64)


def generate_synthetic(spec: SyntheticSpec) -> ObservationGrid:
    """Sample a grid from the ground-truth model.

    ``metadata`` records ``generator_entropy`` (mean conditional entropy of
    the true probabilities over the sampled rows) and ``generator_neg_ll``
    (the true model's mean negLL on the drawn outcomes).
    """
    model = spec.model
    rng = np.random.default_rng(spec.seed)
    cols = []
    for m in model.regressors:
        dist = spec.distributions.get(m.name)
        if dist is None:
            dist = ("flag", 0.5) if m.kind is RegressorKind.FLAG else ("normal", 0.0, 1.0)
        cols.append(_draw(rng, dist, spec.n))
    x = np.column_stack(cols) if cols else np.zeros((spec.n, 0))
    scores = score_matrix(model, x)
    p = softmax(scores)
    u = rng.random(spec.n)
    idx = (u[:, None] > np.cumsum(p, axis=1)[:, :-1]).sum(axis=1)
    outcomes = model.outcome_states
    space = model.status_space
    end = [outcomes[i] for i in idx]
    grid = ObservationGrid.from_labels(
        model.regressors, x, [model.start_status] * spec.n, end, space.states,
        loan_ids=np.array([f"L{i:08d}" for i in range(spec.n)]),
        status_space=space,
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    y_out = np.zeros_like(p)
    y_out[np.arange(spec.n), idx] = 1.0
    nll = row_neg_ll(scores, y_out)[0]
    meta = {
        "generator_entropy": float(ent.mean()),
        "generator_entropy_se": float(ent.std(ddof=1) / math.sqrt(spec.n)) if spec.n > 1 else 0.0,
        "generator_neg_ll": float(nll.mean()),
        "generator_neg_ll_se": float(nll.std(ddof=1) / math.sqrt(spec.n)) if spec.n > 1 else 0.0,
        "seed": spec.seed,
    }
    return ObservationGrid(grid.meta, grid.x, grid.states, grid.start, grid.end, grid.y, grid.loan_ids,
                           None, space, meta)


__all__ = [
    "ColumnSchema",
    "ColumnSpec",
    "Role",
    "SyntheticSpec",
    "generate_synthetic",
    "id_hash_residue",
    "load_csv",
    "load_schema",
    "sample_by_id_hash",
    "save_schema",
    "shuffle",
    "write_csv",
]
