"""Forward projection of transition models.

Three ways to get the state distribution over time:

* :func:`project_matrix` pushes a probability vector through one transition
  matrix per period. Exact, but needs every row of every matrix and cannot
  use path-dependent inputs.
* :func:`simulate_paths` follows individual paths, one transition row per
  path per step. Any input is allowed; the answer is noisy.
* :func:`project_hybrid` treats the "never left the start state" branch
  exactly and simulates only from the moment a path first enters a
  non-absorbing state, so rare detours are oversampled.

Random draws come from a counter-based generator keyed by (seed, path,
period), so results do not depend on batch sizes or on how paths are split
between workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import AllZeroWeights, InputError, NonMarkovianRegressor
from .likelihood import score_matrix, softmax
from .model import ItemModel, StatusSpace

HISTORY_FEATURES = ("time_in_state",)


# --------------------------------------------------------------------------- #
# Random numbers
# --------------------------------------------------------------------------- #

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    """splitmix64 finaliser on a uint64 array."""
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_uniforms(seed: int, paths, t: int, stream: int = 0) -> np.ndarray:
    """Uniforms in [0, 1) that depend only on (seed, stream, path, t)."""
    paths = np.asarray(paths, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _mix(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64) + _GOLDEN * np.uint64(stream + 1))
        key = _mix(key + _GOLDEN * np.uint64(t + 1))
        z = _mix(key + paths * _GOLDEN)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _seed_of(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63))
    if rng is None:
        return int(np.random.SeedSequence().generate_state(1, np.uint64)[0])
    return int(rng)


# --------------------------------------------------------------------------- #
# Transition models
# --------------------------------------------------------------------------- #


@dataclass
class PathHistory:
    """What a path-dependent input can see: periods spent in the current state."""

    time_in_state: np.ndarray

    @classmethod
    def fresh(cls, n: int) -> "PathHistory":
        return cls(np.zeros(n, dtype=np.int64))

    def take(self, idx) -> "PathHistory":
        return PathHistory(self.time_in_state[idx])


class TransitionModel:
    """Maps (period, current states, history) to next-state probabilities.

    Subclasses implement :meth:`_rows` for non-absorbing states; absorbing
    states always return their own indicator. ``rows_evaluated`` counts the
    transition rows actually computed.
    """

    path_dependent = False

    def __init__(self, space: StatusSpace):
        self.space = space
        self.states = space.states
        self.rows_evaluated = 0
        self._absorbing = np.array([space.is_absorbing(s) for s in self.states])

    @property
    def n_states(self) -> int:
        return len(self.states)

    def _rows(self, t: int, state: int, history: PathHistory | None, n: int) -> np.ndarray:
        raise NotImplementedError

    def transition_rows(self, t: int, codes, history: PathHistory | None = None) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        out = np.zeros((len(codes), self.n_states))
        for s in np.unique(codes):
            idx = np.flatnonzero(codes == s)
            if self._absorbing[s]:
                out[idx, s] = 1.0
                continue
            sub = None if history is None else history.take(idx)
            out[idx] = self._rows(t, int(s), sub, len(idx))
            self.rows_evaluated += len(idx)
        return out

    def matrix(self, t: int) -> np.ndarray:
        if self.path_dependent:
            raise NonMarkovianRegressor("this model uses path-dependent inputs")
        return self.transition_rows(t, np.arange(self.n_states), None)


class MarkovTransitionModel(TransitionModel):
    """Fixed matrices: one W x W matrix, a (T, W, W) stack, or a callable of t.

    A stack shorter than the horizon repeats its last matrix.
    """

    def __init__(self, space: StatusSpace, matrices):
        super().__init__(space)
        w = len(space.states)
        if callable(matrices):
            self._get = matrices
        else:
            m = np.asarray(matrices, dtype=np.float64)
            if m.ndim == 2:
                m = m[None]
            if m.shape[1:] != (w, w):
                raise InputError(f"transition matrices must be {w} x {w}")
            if np.any(m < 0) or np.any(np.abs(m.sum(axis=2) - 1.0) > 1e-12):
                raise InputError("transition matrices must be row-stochastic")
            self._get = lambda t: m[min(t, len(m) - 1)]

    def _rows(self, t, state, history, n):
        return np.broadcast_to(np.asarray(self._get(t), dtype=np.float64)[state], (n, self.n_states))


class ItemTransitionModel(TransitionModel):
    """Fitted models, one per start status, fed by covariate paths.

    ``covariates`` maps regressor name to a scalar or a per-period series
    (the last value repeats past its end). ``history_features`` maps
    regressor name to a :data:`HISTORY_FEATURES` entry; any such mapping
    makes the model path-dependent.
    """

    def __init__(
        self,
        models: Sequence[ItemModel] | Mapping[str, ItemModel],
        covariates: Mapping[str, object] | None = None,
        history_features: Mapping[str, str] | None = None,
        space: StatusSpace | None = None,
    ):
        models = list(models.values()) if isinstance(models, Mapping) else list(models)
        if not models:
            raise InputError("need at least one model")
        space = space or models[0].status_space
        super().__init__(space)
        self.models = {}
        for m in models:
            if m.status_space.states != space.states:
                raise InputError("all models must share one status space")
            if m.start_status in self.models:
                raise InputError(f"two models start in {m.start_status!r}")
            self.models[m.start_status] = m
        self.covariates = {k: np.atleast_1d(np.asarray(v, dtype=np.float64)) for k, v in (covariates or {}).items()}
        self.history_features = dict(history_features or {})
        for name, feat in self.history_features.items():
            if feat not in HISTORY_FEATURES:
                raise InputError(f"unknown history feature {feat!r}; known: {HISTORY_FEATURES}")
        for m in models:
            for name in m.regressor_names:
                if name not in self.covariates and name not in self.history_features:
                    raise InputError(f"no covariate path or history feature for regressor {name!r}")
        self.path_dependent = bool(self.history_features)
        for i, s in enumerate(self.states):
            if not self._absorbing[i] and s not in self.models:
                raise InputError(f"no model for non-absorbing state {s!r}")

    def _covariate(self, name: str, t: int) -> float:
        series = self.covariates[name]
        return float(series[min(t, len(series) - 1)])

    def _rows(self, t, state, history, n):
        model = self.models[self.states[state]]
        x = np.empty((n, len(model.regressors)))
        for k, name in enumerate(model.regressor_names):
            feat = self.history_features.get(name)
            if feat is None:
                x[:, k] = self._covariate(name, t)
            elif history is None:
                raise NonMarkovianRegressor(f"regressor {name!r} needs path history")
            else:
                x[:, k] = getattr(history, feat)
        p = softmax(score_matrix(model, x))
        out = np.zeros((n, self.n_states))
        for j, s in enumerate(model.outcome_states):
            out[:, self.states.index(s)] = p[:, j]
        return out


def _as_vector(model: TransitionModel, s0) -> np.ndarray:
    if isinstance(s0, str):
        v = np.zeros(model.n_states)
        v[model.states.index(s0)] = 1.0
        return v
    v = np.asarray(s0, dtype=np.float64)
    if v.shape != (model.n_states,) or np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
        raise InputError("start vector must be a probability vector over the states")
    return v


def _state_code(model: TransitionModel, s0) -> int:
    try:
        return model.states.index(s0)
    except ValueError:
        raise InputError(f"unknown state {s0!r}") from None


# --------------------------------------------------------------------------- #
# Matrix projection and plain simulation
# --------------------------------------------------------------------------- #


@dataclass
class Projection:
    """State distribution per period ``0..horizon`` with standard errors."""

    states: tuple[str, ...]
    probabilities: np.ndarray
    std_error: np.ndarray
    rows_evaluated: int
    n_paths: int = 0

    def to_csv(self) -> str:
        lines = ["time,state,probability,std_error"]
        for t in range(self.probabilities.shape[0]):
            for j, s in enumerate(self.states):
                lines.append(f"{t},{s},{float(self.probabilities[t, j])!r},{float(self.std_error[t, j])!r}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def project_matrix(model: TransitionModel, s0, horizon: int) -> Projection:
    if horizon < 0:
        raise InputError("horizon must be non-negative")
    if model.path_dependent:
        raise NonMarkovianRegressor("matrix projection needs a Markovian model")
    before = model.rows_evaluated
    s = _as_vector(model, s0)
    out = np.empty((horizon + 1, model.n_states))
    out[0] = s
    for t in range(horizon):
        s = s @ model.matrix(t)
        s = s / s.sum()
        out[t + 1] = s
    return Projection(model.states, out, np.zeros_like(out), model.rows_evaluated - before)


def _step(model: TransitionModel, t: int, codes, history: PathHistory, path_ids, seed: int, stream: int):
    """Advance the given paths one period; returns new codes (history updated in place)."""
    probs = model.transition_rows(t, codes, history)
    u = counter_uniforms(seed, path_ids, t, stream)
    cum = np.cumsum(probs, axis=1)
    nxt = (u[:, None] >= cum[:, :-1]).sum(axis=1)
    # rounding can leave the last cumulative sum a hair below 1
    nxt = np.where(probs[np.arange(len(nxt)), nxt] > 0, nxt, np.argmax(probs, axis=1))
    return nxt


def _update_history(history: PathHistory, old, new) -> None:
    history.time_in_state = np.where(new == old, history.time_in_state + 1, 0)


def simulate_paths(model: TransitionModel, s0, horizon: int, n_paths: int, rng=0) -> Projection:
    """Empirical distribution of ``n_paths`` simulated paths from state ``s0``."""
    if n_paths < 1:
        raise InputError("need at least one path")
    if horizon < 0:
        raise InputError("horizon must be non-negative")
    seed = _seed_of(rng)
    before = model.rows_evaluated
    codes = np.full(n_paths, _state_code(model, s0), dtype=np.int64)
    ids = np.arange(n_paths)
    history = PathHistory.fresh(n_paths)
    w = model.n_states
    counts = np.zeros((horizon + 1, w))
    counts[0] = np.bincount(codes, minlength=w)
    for t in range(horizon):
        new = _step(model, t, codes, history, ids, seed, 0)
        _update_history(history, codes, new)
        codes = new
        counts[t + 1] = np.bincount(codes, minlength=w)
    p = counts / n_paths
    se = np.sqrt(p * (1 - p) / n_paths)
    return Projection(model.states, p, se, model.rows_evaluated - before, n_paths)


# --------------------------------------------------------------------------- #
# Hybrid projection
# --------------------------------------------------------------------------- #


@dataclass
class HybridTrace:
    """The exact "always in the start state" branch.

    ``p_always[t]`` is the probability of never having left the start state
    by period t, ``absorbed[t]`` the mass that went straight from that branch
    into each absorbing state by t, and ``enter[t]`` the mass leaving it into
    each non-absorbing state exactly at period t.
    """

    states: tuple[str, ...]
    start: int
    horizon: int
    p_always: np.ndarray
    absorbed: np.ndarray
    enter: np.ndarray
    rows_evaluated: int = 0

    @property
    def p_enter(self) -> float:
        """Probability of ever entering a simulated (non-absorbing) state by the horizon."""
        return float(self.enter.sum())

    @property
    def entry_distribution(self) -> np.ndarray:
        """``enter`` normalised to sum to 1; all zeros when nothing enters."""
        total = self.enter.sum()
        return self.enter / total if total > 0 else np.zeros_like(self.enter)


def hybrid_trace(model: TransitionModel, horizon: int, start="C") -> HybridTrace:
    if horizon < 0:
        raise InputError("horizon must be non-negative")
    c = _state_code(model, start)
    if model.space.is_absorbing(model.states[c]):
        raise InputError("the hybrid start state must not be absorbing")
    before = model.rows_evaluated
    w = model.n_states
    absorbing = model._absorbing
    p = np.zeros(horizon + 1)
    absorbed = np.zeros((horizon + 1, w))
    enter = np.zeros((horizon + 1, w))
    p[0] = 1.0
    history = PathHistory.fresh(1)
    for t in range(horizon):
        row = model.transition_rows(t, [c], history)[0]
        flow = p[t] * row
        p[t + 1] = flow[c]
        absorbed[t + 1] = absorbed[t] + np.where(absorbing, flow, 0.0)
        moved = np.where(absorbing, 0.0, flow)
        moved[c] = 0.0
        enter[t + 1] = moved
        history.time_in_state = history.time_in_state + 1
    return HybridTrace(model.states, c, horizon, p, absorbed, enter, model.rows_evaluated - before)


def project_hybrid(model: TransitionModel, horizon: int, n_sims: int, rng=0, start="C",
                   trace: HybridTrace | None = None) -> Projection:
    """Exact always-in-start branch plus simulations started at sampled entry times.

    Entry (time, state) pairs are drawn by stratified inverse-CDF sampling
    on the entry distribution. Before its entry time a simulated path sits
    in the start state; that mass is taken back out of the exact branch, so
    every period sums to one exactly.
    """
    if n_sims < 1:
        raise InputError("need at least one simulation")
    seed = _seed_of(rng)
    before = model.rows_evaluated
    tr = trace or hybrid_trace(model, horizon, start)
    c, w = tr.start, model.n_states
    p3 = tr.p_enter
    # exact part: never-left mass minus the share the simulated paths carry before entering
    exact = np.zeros((horizon + 1, w))
    exact[:, c] = tr.p_always
    exact += tr.absorbed
    if p3 <= 0.0:
        return Projection(model.states, exact, np.zeros_like(exact), model.rows_evaluated - before, 0)
    later = tr.enter.sum(axis=1)[::-1].cumsum()[::-1]  # mass entering at t or later
    future = np.append(later[1:], 0.0)  # strictly after t
    exact[:, c] -= future

    flat = tr.entry_distribution.ravel()
    cdf = np.cumsum(flat)
    cdf[-1] = 1.0
    ids = np.arange(n_sims)
    u = (ids + counter_uniforms(seed, ids, 0, 1)) / n_sims
    pick = np.minimum(np.searchsorted(cdf, u, side="right"), len(flat) - 1)
    t_entry, s_entry = np.divmod(pick, w)

    states = np.full(n_sims, c, dtype=np.int64)
    history = PathHistory(np.zeros(n_sims, dtype=np.int64))
    counts = np.zeros((horizon + 1, w))
    active = np.zeros(n_sims, dtype=bool)
    for t in range(horizon + 1):
        starting = t_entry == t
        if np.any(starting):
            states[starting] = s_entry[starting]
            history.time_in_state[starting] = 0
            active |= starting
        # inactive paths are in the start state with the all-start history
        history.time_in_state[~active] = t
        counts[t] = np.bincount(states, minlength=w)
        if t == horizon:
            break
        idx = np.flatnonzero(active)
        if len(idx):
            sub_hist = history.take(idx)
            new = _step(model, t, states[idx], sub_hist, idx, seed, 0)
            _update_history(sub_hist, states[idx], new)
            states[idx] = new
            history.time_in_state[idx] = sub_hist.time_in_state
    mean = counts / n_sims
    probs = exact + p3 * mean
    se = p3 * np.sqrt(mean * (1 - mean) / n_sims)
    return Projection(model.states, probs, se, model.rows_evaluated - before, n_sims)


# --------------------------------------------------------------------------- #
# Spreading simulations across loans
# --------------------------------------------------------------------------- #


@dataclass
class PathAllocation:
    weights: np.ndarray
    gamma: float
    epsilon: float
    alpha: np.ndarray
    q: int
    counts: np.ndarray
    passes: int = 0
    remaining: np.ndarray = field(default=None)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def allocate_paths(weights, q: int, rng=0, deterministic: bool = False) -> PathAllocation:
    """Hand out about ``n * q`` simulations in proportion to ``weights``.

    Random version: sweep the loans, giving loan n a simulation with
    probability min(1, w(n)/eps) and taking eps off its weight when it gets
    one, until n*q are handed out or no weight exceeds eps/2. The
    deterministic version gives each loan ceil(w(n)/eps).
    """
    w = np.array(weights, dtype=np.float64)
    if w.ndim != 1 or len(w) == 0:
        raise InputError("weights must be a non-empty vector")
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise InputError("weights must be finite and non-negative")
    if q < 1:
        raise InputError("q must be at least 1")
    gamma = float(w.sum())
    if gamma <= 0:
        raise AllZeroWeights("all weights are zero")
    n = len(w)
    eps = gamma / (n * q)
    alpha = np.minimum(1.0, w / eps)
    if deterministic:
        counts = np.ceil(w / eps - 1e-9).astype(np.int64)
        return PathAllocation(w, gamma, eps, alpha, q, counts, 0, np.zeros(n))
    gen = np.random.default_rng(rng)
    left = w.copy()
    counts = np.zeros(n, dtype=np.int64)
    budget = n * q
    given = 0
    passes = 0
    while given < budget and np.any(left > eps / 2):
        passes += 1
        nu = gen.random(n)
        for i in range(n):
            a = min(1.0, left[i] / eps)
            if a <= 0.0 or nu[i] > a:
                continue
            left[i] -= eps
            counts[i] += 1
            given += 1
            if given >= budget:
                break
    return PathAllocation(w, gamma, eps, alpha, q, counts, passes, left)


__all__ = [
    "HISTORY_FEATURES",
    "HybridTrace",
    "ItemTransitionModel",
    "MarkovTransitionModel",
    "PathAllocation",
    "PathHistory",
    "Projection",
    "TransitionModel",
    "allocate_paths",
    "counter_uniforms",
    "hybrid_trace",
    "project_hybrid",
    "project_matrix",
    "simulate_paths",
]
