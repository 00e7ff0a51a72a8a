"""Shared domain types, grid validation and the model/report file formats.

Nothing in here fits or projects anything. The types are immutable once
built; arrays held by :class:`ObservationGrid` are flagged read-only.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError, InvalidModel, InvalidStatusSpace

MODEL_FILE_VERSION = 1


# --------------------------------------------------------------------------- #
# Status space
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class StatusSpace:
    """Statuses, the transitions allowed out of each, and absorbing statuses.

    Absorbing statuses that are missing from ``reachable`` are filled in as
    self-loops.
    """

    states: tuple[str, ...]
    reachable: Mapping[str, tuple[str, ...]]
    absorbing: frozenset[str] = frozenset()

    def __post_init__(self):
        states = tuple(str(s) for s in self.states)
        if len(set(states)) != len(states):
            raise InvalidStatusSpace(f"duplicate states in {states}")
        absorbing = frozenset(str(s) for s in self.absorbing)
        reachable = {str(k): tuple(str(v) for v in vs) for k, vs in dict(self.reachable).items()}
        for s in absorbing:
            if s not in states:
                raise InvalidStatusSpace(f"absorbing state {s!r} is not a known state")
            if s not in reachable:
                reachable[s] = (s,)
            elif reachable[s] != (s,):
                raise InvalidStatusSpace(f"absorbing state {s!r} must reach exactly itself")
        for start, ends in reachable.items():
            if start not in states:
                raise InvalidStatusSpace(f"start state {start!r} is not a known state")
            if not ends:
                raise InvalidStatusSpace(f"state {start!r} reaches nothing")
            if len(set(ends)) != len(ends):
                raise InvalidStatusSpace(f"duplicate end states for {start!r}")
            for e in ends:
                if e not in states:
                    raise InvalidStatusSpace(f"{start!r} -> {e!r}: unknown end state")
        # keep the declared state order for the mapping as well
        ordered = {s: reachable[s] for s in states if s in reachable}
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "absorbing", absorbing)
        object.__setattr__(self, "reachable", ordered)

    def index(self, state: str) -> int:
        try:
            return self.states.index(state)
        except ValueError:
            raise InputError(f"unknown state {state!r}") from None

    def is_absorbing(self, state: str) -> bool:
        return state in self.absorbing

    def reachable_from(self, state: str) -> tuple[str, ...]:
        try:
            return self.reachable[state]
        except KeyError:
            raise InputError(f"no transitions defined out of {state!r}") from None

    def to_dict(self) -> dict:
        return {
            "states": list(self.states),
            "reachable": {k: list(v) for k, v in self.reachable.items()},
            "absorbing": [s for s in self.states if s in self.absorbing],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StatusSpace":
        return cls(
            states=tuple(d["states"]),
            reachable={k: tuple(v) for k, v in d["reachable"].items()},
            absorbing=frozenset(d.get("absorbing", ())),
        )


# --------------------------------------------------------------------------- #
# Regressors and the observation grid
# --------------------------------------------------------------------------- #


class RegressorKind(str, enum.Enum):
    FLAG = "FLAG"
    REAL = "REAL"
    CATEGORICAL = "CATEGORICAL"


@dataclass(frozen=True)
class RegressorMeta:
    """Column description. Categorical columns hold integer level codes."""

    name: str
    kind: RegressorKind = RegressorKind.REAL
    levels: tuple[str, ...] = ()
    curve_eligible: bool | None = None

    def __post_init__(self):
        kind = RegressorKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if self.curve_eligible is None:
            object.__setattr__(self, "curve_eligible", kind is RegressorKind.REAL)
        elif self.curve_eligible and kind is not RegressorKind.REAL:
            raise InputError(f"regressor {self.name!r}: only REAL columns can carry curves")

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind.value, "curve_eligible": bool(self.curve_eligible)}
        if self.levels:
            d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegressorMeta":
        return cls(
            name=d["name"],
            kind=RegressorKind(d.get("kind", "REAL")),
            levels=tuple(d.get("levels", ())),
            curve_eligible=d.get("curve_eligible"),
        )


def _frozen_array(a, dtype=None, order="C") -> np.ndarray:
    arr = np.array(a, dtype=dtype, order=order, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ObservationGrid:
    """N observations of K regressors with start/end statuses.

    ``start`` and ``end`` are integer codes into ``states``; ``y`` is the
    N x W target matrix (W = len(states)), one-hot on ``end`` unless noise
    has been injected. ``x`` is stored column-major.
    """

    meta: tuple[RegressorMeta, ...]
    x: np.ndarray
    states: tuple[str, ...]
    start: np.ndarray
    end: np.ndarray
    y: np.ndarray
    loan_ids: np.ndarray | None = None
    months: np.ndarray | None = None
    status_space: StatusSpace | None = None
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        meta = tuple(self.meta)
        states = tuple(str(s) for s in self.states)
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, len(meta)) if meta else x.reshape(-1, 0)
        n = x.shape[0]
        if x.shape[1] != len(meta):
            raise InputError(f"x has {x.shape[1]} columns but {len(meta)} regressors are declared")
        start = np.asarray(self.start)
        end = np.asarray(self.end)
        y = np.asarray(self.y, dtype=np.float64)
        if start.shape != (n,) or end.shape != (n,):
            raise InputError("start/end must have one entry per row")
        if y.shape != (n, len(states)):
            raise InputError(f"y must be {n} x {len(states)}, got {y.shape}")
        code_dtype = np.int8 if len(states) < 127 else np.int32
        object.__setattr__(self, "meta", meta)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "x", _frozen_array(x, np.float64, order="F"))
        object.__setattr__(self, "start", _frozen_array(start, code_dtype))
        object.__setattr__(self, "end", _frozen_array(end, code_dtype))
        object.__setattr__(self, "y", _frozen_array(y, np.float64))
        for name in ("loan_ids", "months"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v).astype(str)
                if v.shape != (n,):
                    raise InputError(f"{name} must have one entry per row")
                object.__setattr__(self, name, _frozen_array(v))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @classmethod
    def from_labels(
        cls,
        meta: Sequence[RegressorMeta],
        x,
        start_status: Sequence[str],
        end_status: Sequence[str],
        states: Sequence[str],
        **kwargs,
    ) -> "ObservationGrid":
        """Build a grid from status labels, with one-hot targets."""
        states = tuple(states)
        lookup = {s: i for i, s in enumerate(states)}
        try:
            start = np.array([lookup[s] for s in start_status], dtype=np.int64)
            end = np.array([lookup[s] for s in end_status], dtype=np.int64)
        except KeyError as exc:
            raise InputError(f"status {exc.args[0]!r} is not in {states}") from None
        y = np.zeros((len(end), len(states)))
        y[np.arange(len(end)), end] = 1.0
        return cls(meta=tuple(meta), x=x, states=states, start=start, end=end, y=y, **kwargs)

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]

    @property
    def n_regressors(self) -> int:
        return self.x.shape[1]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.meta)

    @property
    def start_status(self) -> np.ndarray:
        return np.asarray(self.states, dtype=object)[self.start]

    @property
    def end_status(self) -> np.ndarray:
        return np.asarray(self.states, dtype=object)[self.end]

    def column(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise InputError(f"unknown regressor {name!r}") from None

    def take(self, rows) -> "ObservationGrid":
        rows = np.asarray(rows)
        return ObservationGrid(
            meta=self.meta,
            x=self.x[rows],
            states=self.states,
            start=self.start[rows],
            end=self.end[rows],
            y=self.y[rows],
            loan_ids=None if self.loan_ids is None else self.loan_ids[rows],
            months=None if self.months is None else self.months[rows],
            status_space=self.status_space,
            metadata=self.metadata,
        )

    def with_y(self, y) -> "ObservationGrid":
        return replace(self, y=y)

    def space(self) -> StatusSpace:
        """The declared status space, or one inferred from observed transitions."""
        if self.status_space is not None:
            return self.status_space
        return infer_status_space(self)

    def memory_bytes(self) -> int:
        total = self.x.nbytes + self.y.nbytes + self.start.nbytes + self.end.nbytes
        for v in (self.loan_ids, self.months):
            if v is not None:
                total += v.nbytes
        return total


def infer_status_space(grid: ObservationGrid) -> StatusSpace:
    pairs = set(zip(grid.start.tolist(), grid.end.tolist()))
    reachable = {}
    for i, s in enumerate(grid.states):
        ends = tuple(grid.states[j] for j in range(len(grid.states)) if (i, j) in pairs)
        if ends:
            reachable[s] = ends
    return StatusSpace(grid.states, reachable)


def validate_grid(grid: ObservationGrid, space: StatusSpace, max_messages: int = 100) -> list[str]:
    """Return a list of invariant violations (empty when the grid is valid)."""
    problems: list[str] = []

    def add(msg: str):
        problems.append(msg)

    unknown = [s for s in grid.states if s not in space.states]
    if unknown:
        add(f"grid states {unknown} are not in the status space")
        return problems

    y = grid.y
    bad_rows: list[tuple[int, str]] = []
    neg = np.flatnonzero((y < 0).any(axis=1))
    bad_rows += [(int(i), "has a negative target probability") for i in neg]
    sums = y.sum(axis=1)
    off = np.flatnonzero(np.abs(sums - 1.0) > 1e-12)
    bad_rows += [(int(i), f"target row sums to {float(sums[i])!r}, not 1") for i in off]

    allowed = np.zeros((len(grid.states), len(grid.states)), dtype=bool)
    for i, s in enumerate(grid.states):
        for e in space.reachable.get(s, ()):
            if e in grid.states:
                allowed[i, grid.states.index(e)] = True
    unreachable = np.flatnonzero(~allowed[grid.start, grid.end])
    bad_rows += [
        (int(i), f"end status {grid.states[grid.end[i]]!r} is not reachable from {grid.states[grid.start[i]]!r}")
        for i in unreachable
    ]

    nonfinite = np.flatnonzero(~np.isfinite(grid.x).all(axis=1))
    bad_rows += [(int(i), "has a non-finite regressor value") for i in nonfinite]

    for k, m in enumerate(grid.meta):
        col = grid.x[:, k]
        if m.kind is RegressorKind.FLAG:
            rows = np.flatnonzero((col != 0) & (col != 1))
            bad_rows += [(int(i), f"flag {m.name!r} is not 0/1") for i in rows]
        elif m.kind is RegressorKind.CATEGORICAL:
            rows = np.flatnonzero((col != np.round(col)) | (col < 0) | (col >= max(len(m.levels), 1)))
            bad_rows += [(int(i), f"categorical {m.name!r} has an invalid level code") for i in rows]

    bad_rows.sort(key=lambda r: r[0])
    for i, msg in bad_rows[:max_messages]:
        add(f"row {i}: {msg}")
    if len(bad_rows) > max_messages:
        add(f"... and {len(bad_rows) - max_messages} more row violations")
    return problems


# --------------------------------------------------------------------------- #
# Curves and the fitted model
# --------------------------------------------------------------------------- #


class CurveFamily(str, enum.Enum):
    LOGISTIC = "LOGISTIC"
    GAUSSIAN = "GAUSSIAN"


@dataclass(frozen=True)
class CurveSpec:
    """One fitted curve.

    LOGISTIC: ``b`` is the center and ``a**2`` the slope.
    GAUSSIAN: ``a`` is the center and ``b`` the width.
    """

    family: CurveFamily
    a: float
    b: float
    regressor: int
    to_state: str
    beta: float

    def __post_init__(self):
        object.__setattr__(self, "family", CurveFamily(self.family))
        for name in ("a", "b", "beta"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise InvalidModel(f"curve parameter {name}={v} is not finite")
            object.__setattr__(self, name, v)
        if self.family is CurveFamily.GAUSSIAN and self.b == 0.0:
            raise InvalidModel("gaussian curve width must be nonzero")
        object.__setattr__(self, "regressor", int(self.regressor))

    @property
    def center(self) -> float:
        return self.b if self.family is CurveFamily.LOGISTIC else self.a

    @property
    def slope(self) -> float:
        return self.a * self.a if self.family is CurveFamily.LOGISTIC else abs(self.b)

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "a": self.a,
            "b": self.b,
            "regressor": self.regressor,
            "to_state": self.to_state,
            "beta": self.beta,
        }


@dataclass(frozen=True)
class StateCoefficients:
    intercept: float
    flag_betas: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "flag_betas", tuple(float(b) for b in self.flag_betas))
        if not all(math.isfinite(v) for v in (self.intercept, *self.flag_betas)):
            raise InvalidModel("coefficients must be finite")


def default_reference_state(space: StatusSpace, start_status: str) -> str:
    """Self-transition when allowed, otherwise the first reachable state."""
    ends = space.reachable_from(start_status)
    return start_status if start_status in ends else ends[0]


@dataclass(frozen=True)
class ItemModel:
    """Transition model out of a single start status.

    The reference end state has its power score pinned at zero; every other
    reachable end state carries an intercept, a beta per regressor column
    (non-FLAG entries are held at zero by the fitter), and any curves.
    """

    status_space: StatusSpace
    start_status: str
    reference_state: str
    regressors: tuple[RegressorMeta, ...]
    per_state: Mapping[str, StateCoefficients]
    curves: tuple[CurveSpec, ...] = ()

    def __post_init__(self):
        space = self.status_space
        ends = space.reachable_from(self.start_status)
        if self.reference_state not in ends:
            raise InvalidModel(f"reference {self.reference_state!r} is not reachable from {self.start_status!r}")
        regressors = tuple(self.regressors)
        k = len(regressors)
        per_state = dict(self.per_state)
        free = [s for s in ends if s != self.reference_state]
        if set(per_state) != set(free):
            raise InvalidModel(f"coefficients needed for exactly {free}, got {sorted(per_state)}")
        for s, coef in per_state.items():
            if len(coef.flag_betas) != k:
                raise InvalidModel(f"state {s!r}: {len(coef.flag_betas)} betas for {k} regressors")
        curves = tuple(self.curves)
        for c in curves:
            if c.to_state not in free:
                raise InvalidModel(f"curve targets {c.to_state!r}, which is not a free reachable state")
            if not 0 <= c.regressor < k:
                raise InvalidModel(f"curve regressor index {c.regressor} out of range")
        object.__setattr__(self, "regressors", regressors)
        object.__setattr__(self, "per_state", {s: per_state[s] for s in free})
        object.__setattr__(self, "curves", curves)

    @classmethod
    def empty(
        cls,
        space: StatusSpace,
        start_status: str,
        regressors: Sequence[RegressorMeta],
        reference_state: str | None = None,
    ) -> "ItemModel":
        ref = reference_state or default_reference_state(space, start_status)
        k = len(regressors)
        per_state = {
            s: StateCoefficients(0.0, (0.0,) * k) for s in space.reachable_from(start_status) if s != ref
        }
        return cls(space, start_status, ref, tuple(regressors), per_state, ())

    @property
    def outcome_states(self) -> tuple[str, ...]:
        return self.status_space.reachable_from(self.start_status)

    @property
    def free_states(self) -> tuple[str, ...]:
        return tuple(s for s in self.outcome_states if s != self.reference_state)

    @property
    def reference_index(self) -> int:
        return self.outcome_states.index(self.reference_state)

    @property
    def regressor_names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.regressors)

    def with_curves(self, curves: Iterable[CurveSpec]) -> "ItemModel":
        return replace(self, curves=tuple(curves))

    def with_coefficients(self, per_state: Mapping[str, StateCoefficients]) -> "ItemModel":
        return replace(self, per_state=dict(per_state))

    def n_parameters(self, params_per_curve: int = 3) -> int:
        n_flags = sum(1 for m in self.regressors if m.kind is RegressorKind.FLAG)
        return len(self.free_states) * (1 + n_flags) + params_per_curve * len(self.curves)


# --------------------------------------------------------------------------- #
# Configuration and report
# --------------------------------------------------------------------------- #


class Criterion(str, enum.Enum):
    AIC = "AIC"
    BIC = "BIC"


@dataclass(frozen=True)
class FitConfig:
    """Knobs for :func:`itemfit.fitter.fit`.

    ``m0=None`` means min(10**4, ceil(N/100)). ``sigma_stop`` and ``adaptive``
    switch the two comparator refinements off for reference runs.
    ``params_per_curve`` is 3 (intercept shift is free) or 4 for stricter
    accounting.
    """

    criterion: Criterion = Criterion.AIC
    max_curves: int = 20
    comparator_c: float = 5.0
    m0: int | None = None
    ll_cap: float = 20.0
    noise_sd: float = 0.0
    anneal_loops: int = 0
    seed: int = 0
    sigma_stop: bool = True
    adaptive: bool = True
    params_per_curve: int = 3
    max_iter: int = 100
    threads: int = 1
    start_status: str | None = None

    def __post_init__(self):
        crit = self.criterion.value if isinstance(self.criterion, Criterion) else str(self.criterion).upper()
        object.__setattr__(self, "criterion", Criterion(crit))
        if self.comparator_c <= 0:
            raise InputError("comparator_c must be positive")
        if self.m0 is not None and self.m0 < 2:
            raise InputError("m0 must be at least 2")
        if self.ll_cap <= 0:
            raise InputError("ll_cap must be positive")
        if not 0.0 <= self.noise_sd <= 1e-3:
            raise InputError("noise_sd must lie in [0, 1e-3]")
        if self.max_curves < 0 or self.anneal_loops < 0:
            raise InputError("max_curves and anneal_loops must be non-negative")
        if self.params_per_curve not in (3, 4):
            raise InputError("params_per_curve must be 3 or 4")
        if self.threads < 1:
            raise InputError("threads must be at least 1")

    def resolved_m0(self, n_rows: int) -> int:
        return resolve_m0(n_rows, self.m0)


def resolve_m0(n_rows: int, m0: int | None = None) -> int:
    if m0 is None:
        m0 = min(10_000, math.ceil(n_rows / 100))
    return max(2, min(int(m0), max(n_rows, 2)))


class TerminalReason(str, enum.Enum):
    MAX_CURVES = "MAX_CURVES"
    CRITERION_FAILED = "CRITERION_FAILED"
    NO_IMPROVEMENT = "NO_IMPROVEMENT"


@dataclass(frozen=True)
class ReportEntry:
    regressor: str
    to_state: str
    family: CurveFamily
    center: float
    slope: float
    neg_ll: float
    delta_aic: float
    delta_bic: float


REPORT_COLUMNS = ("regressor", "to_state", "type", "center", "slope", "neg_ll", "delta_aic", "delta_bic")


@dataclass
class FitReport:
    entries: list[ReportEntry] = field(default_factory=list)
    reason: TerminalReason | None = None
    base_neg_ll: float | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for e in self.entries:
            w.writerow(
                [e.regressor, e.to_state, e.family.value.lower()]
                + [repr(float(v)) for v in (e.center, e.slope, e.neg_ll, e.delta_aic, e.delta_bic)]
            )
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read_csv(cls, path) -> "FitReport":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        entries = [
            ReportEntry(
                r["regressor"], r["to_state"], CurveFamily(r["type"].upper()),
                float(r["center"]), float(r["slope"]), float(r["neg_ll"]),
                float(r["delta_aic"]), float(r["delta_bic"]),
            )
            for r in rows
        ]
        return cls(entries)


# --------------------------------------------------------------------------- #
# Model file
# --------------------------------------------------------------------------- #


def model_to_dict(model: ItemModel) -> dict:
    space = model.status_space
    return {
        "version": MODEL_FILE_VERSION,
        "start_status": model.start_status,
        "reference_state": model.reference_state,
        "states": list(space.states),
        "reachable": {k: list(v) for k, v in space.reachable.items()},
        "absorbing": [s for s in space.states if s in space.absorbing],
        "regressors": [m.to_dict() for m in model.regressors],
        "intercepts": {s: c.intercept for s, c in model.per_state.items()},
        "flag_betas": {s: list(c.flag_betas) for s, c in model.per_state.items()},
        "curves": [c.to_dict() for c in model.curves],
    }


def model_from_dict(d: Mapping) -> ItemModel:
    version = d.get("version")
    if version != MODEL_FILE_VERSION:
        raise InvalidModel(f"unsupported model file version {version!r}")
    try:
        space = StatusSpace(
            states=tuple(d["states"]),
            reachable={k: tuple(v) for k, v in d["reachable"].items()},
            absorbing=frozenset(d.get("absorbing", ())),
        )
        regressors = tuple(RegressorMeta.from_dict(r) for r in d["regressors"])
        per_state = {
            s: StateCoefficients(d["intercepts"][s], tuple(d["flag_betas"][s])) for s in d["intercepts"]
        }
        curves = tuple(
            CurveSpec(CurveFamily(c["family"]), c["a"], c["b"], c["regressor"], c["to_state"], c["beta"])
            for c in d["curves"]
        )
        return ItemModel(space, d["start_status"], d["reference_state"], regressors, per_state, curves)
    except KeyError as exc:
        raise InvalidModel(f"model file is missing field {exc.args[0]!r}") from None


def serialize_model(model: ItemModel) -> str:
    # json emits floats via repr, the shortest string that round-trips exactly
    return json.dumps(model_to_dict(model), indent=2, ensure_ascii=False) + "\n"


def deserialize_model(text: str) -> ItemModel:
    try:
        return model_from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise InvalidModel(f"model file is not valid JSON: {exc}") from None


def save_model(model: ItemModel, path) -> None:
    Path(path).write_text(serialize_model(model), encoding="utf-8")


def load_model(path) -> ItemModel:
    return deserialize_model(Path(path).read_text(encoding="utf-8"))
