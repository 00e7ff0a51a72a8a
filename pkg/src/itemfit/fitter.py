"""Greedy curve addition, coefficient refits, information-criterion gating and annealing.

A fit alternates two kinds of optimisation:

* :func:`fit_coefficients` refits every intercept, flag beta and curve beta
  with the curve shapes frozen.
* :func:`fit_candidate_curve` tries one new curve on one (regressor, end
  state) cell. Only four scalars move (curve a, b, beta and an intercept
  shift for that state); all other scores come from a cache.

:func:`fit` runs every candidate cell each round, keeps the best one if it
passes AIC/BIC, and starts over. :func:`anneal` revisits regressors one at a
time and swaps their curves for freshly fitted ones when that helps.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, logsumexp

from . import curves as _curves
from .errors import DegenerateRegressor, EmptyGrid, InputError, NoEligibleRegressors, SingleLevelCategorical
from .likelihood import ModelData, model_data, row_neg_ll, score_gradient, score_matrix
from .model import (
    Criterion,
    CurveFamily,
    CurveSpec,
    FitConfig,
    FitReport,
    ItemModel,
    ObservationGrid,
    RegressorKind,
    RegressorMeta,
    ReportEntry,
    StateCoefficients,
    TerminalReason,
)
from .optimizer import minimize

FAMILIES = (CurveFamily.LOGISTIC, CurveFamily.GAUSSIAN)


def criterion_delta(k_added: int, n: int, before: float, after: float, criterion=Criterion.AIC) -> float:
    """Change in AIC or BIC when ``k_added`` parameters move the mean negLL from ``before`` to ``after``."""
    if n <= 0:
        raise InputError("N must be positive")
    fit_term = 2.0 * n * (after - before)
    if Criterion(criterion) is Criterion.AIC:
        return 2.0 * k_added + fit_term
    return k_added * math.log(n) + fit_term


def _minimize_opts(config: FitConfig) -> dict:
    return dict(
        c=config.comparator_c,
        m0=config.m0,
        sigma_stop=config.sigma_stop,
        adaptive=config.adaptive,
        max_iter=config.max_iter,
    )


def _require_rows(grid: ObservationGrid, model: ItemModel) -> ModelData:
    if grid.n_rows == 0:
        raise EmptyGrid("grid has no rows")
    data = model_data(grid, model)
    if data.n == 0:
        raise EmptyGrid(f"no rows start in {model.start_status!r}")
    return data


# --------------------------------------------------------------------------- #
# Coefficient refit
# --------------------------------------------------------------------------- #


class CoefficientObjective:
    """Mean negLL as a function of intercepts, flag betas and curve betas.

    Each free state gets a design matrix ``[1, flags..., curve values...]``;
    betas on non-flag columns stay as a fixed offset.
    """

    def __init__(self, model: ItemModel, data: ModelData, cap: float = 20.0):
        self.model = model
        self.y = data.y
        self.cap = cap
        self.n_rows = data.n
        x = data.x
        outcomes = model.outcome_states
        self.n_out = len(outcomes)
        self.flag_cols = [k for k, m in enumerate(model.regressors) if m.kind is RegressorKind.FLAG]
        other_cols = [k for k, m in enumerate(model.regressors) if m.kind is not RegressorKind.FLAG]
        curve_vals = [_curves.eval_curve(c, x[:, c.regressor]) for c in model.curves]
        self.blocks = []  # (score column, design, offset, curve indices)
        for s in model.free_states:
            coef = model.per_state[s]
            idx = [i for i, c in enumerate(model.curves) if c.to_state == s]
            design = np.column_stack([np.ones(self.n_rows)] + [x[:, k] for k in self.flag_cols]
                                     + [curve_vals[i] for i in idx])
            offset = None
            if other_cols:
                betas = np.array([coef.flag_betas[k] for k in other_cols])
                if np.any(betas != 0):
                    offset = x[:, other_cols] @ betas
            self.blocks.append((outcomes.index(s), design, offset, idx))
        self.sizes = [b[1].shape[1] for b in self.blocks]

    def initial(self) -> np.ndarray:
        parts = []
        for s, (_, _, _, idx) in zip(self.model.free_states, self.blocks):
            coef = self.model.per_state[s]
            parts.append([coef.intercept] + [coef.flag_betas[k] for k in self.flag_cols]
                         + [self.model.curves[i].beta for i in idx])
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts]) if parts else np.zeros(0)

    def _split(self, theta):
        return np.split(np.asarray(theta, dtype=np.float64), np.cumsum(self.sizes)[:-1])

    def scores(self, theta, start: int, stop: int) -> np.ndarray:
        s = np.zeros((stop - start, self.n_out))
        for (col, design, offset, _), th in zip(self.blocks, self._split(theta)):
            s[:, col] = design[start:stop] @ th
            if offset is not None:
                s[:, col] += offset[start:stop]
        return s

    def row_losses(self, theta, start: int, stop: int) -> np.ndarray:
        return row_neg_ll(self.scores(theta, start, stop), self.y[start:stop], self.cap)[0]

    def gradient(self, theta, m: int) -> np.ndarray:
        g = score_gradient(self.scores(theta, 0, m), self.y[:m], self.cap)
        return np.concatenate([design[:m].T @ g[:, col] / m for col, design, _, _ in self.blocks])

    def to_model(self, theta) -> ItemModel:
        model = self.model
        per_state = {}
        curves = list(model.curves)
        for s, (_, _, _, idx), th in zip(model.free_states, self.blocks, self._split(theta)):
            betas = list(model.per_state[s].flag_betas)
            nf = len(self.flag_cols)
            for j, k in enumerate(self.flag_cols):
                betas[k] = th[1 + j]
            per_state[s] = StateCoefficients(th[0], betas)
            for j, i in enumerate(idx):
                curves[i] = replace(curves[i], beta=float(th[1 + nf + j]))
        return ItemModel(model.status_space, model.start_status, model.reference_state, model.regressors,
                         per_state, tuple(curves))


def full_neg_ll(model: ItemModel, data: ModelData, cap: float = 20.0) -> float:
    return float(row_neg_ll(score_matrix(model, data.x), data.y, cap)[0].mean())


def fit_coefficients(model: ItemModel, grid: ObservationGrid, config: FitConfig | None = None) -> ItemModel:
    """Refit intercepts, flag betas and curve betas with curve shapes frozen.

    Starts from the model's current values and never returns something with
    a higher full-grid negLL than the input.
    """
    config = config or FitConfig()
    data = _require_rows(grid, model)
    if not model.free_states:
        return model
    obj = CoefficientObjective(model, data, config.ll_cap)
    x0 = obj.initial()
    res = minimize(obj, x0, **_minimize_opts(config))
    if res.accepted_steps == 0:
        return model
    new = obj.to_model(res.x)
    if full_neg_ll(new, data, config.ll_cap) > full_neg_ll(model, data, config.ll_cap):
        return model
    return new


def empirical_intercepts(model: ItemModel, data: ModelData) -> ItemModel:
    """Set intercepts to the observed log-odds against the reference state."""
    freq = np.maximum(data.y.mean(axis=0), 1e-9)
    ref = freq[model.reference_index]
    outcomes = model.outcome_states
    per_state = {
        s: StateCoefficients(math.log(freq[outcomes.index(s)] / ref), model.per_state[s].flag_betas)
        for s in model.free_states
    }
    return model.with_coefficients(per_state)


# --------------------------------------------------------------------------- #
# Candidate curves
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class ScoreCache:
    """Current power scores of a model on its grid rows."""

    model: ItemModel
    data: ModelData
    scores: np.ndarray
    neg_ll: float
    cap: float


def score_cache(model: ItemModel, grid: ObservationGrid, cap: float = 20.0) -> ScoreCache:
    data = _require_rows(grid, model)
    s = score_matrix(model, data.x)
    return ScoreCache(model, data, s, float(row_neg_ll(s, data.y, cap)[0].mean()), cap)


@dataclass(frozen=True)
class CandidateResult:
    curve: CurveSpec
    intercept_adjustment: float
    neg_ll: float
    delta_aic: float
    delta_bic: float
    rows_touched: int = 0


class CandidateObjective:
    """negLL when one state's cached score gains ``delta + beta * curve(z)``.

    ``theta = (p, q, beta, delta)`` where (p, q) are the curve's (a, b) in
    standardized regressor units ``z = (x - mean) / std``.
    """

    def __init__(self, z: np.ndarray, scores: np.ndarray, y: np.ndarray, col: int, family: CurveFamily,
                 cap: float = 20.0):
        self.z = z
        self.family = CurveFamily(family)
        self.cap = cap
        self.n_rows = len(z)
        self.s_j = scores[:, col]
        others = np.delete(scores, col, axis=1)
        self.other = logsumexp(others, axis=1) if others.shape[1] else np.full(len(z), -np.inf)
        self.ysum = y.sum(axis=1)
        self.y_j = y[:, col]
        self.ys = np.einsum("ij,ij->i", y, scores)

    def _curve(self, theta, sl):
        p, q = theta[0], theta[1]
        if self.family is CurveFamily.GAUSSIAN and q == 0.0:
            return None
        return _curves.evaluate(self.family, p, q, self.z[sl])

    def _raw(self, theta, sl):
        c = self._curve(theta, sl)
        if c is None:
            return None, None, None
        u = theta[3] + theta[2] * c
        t = self.s_j[sl] + u
        raw = np.logaddexp(self.other[sl], t) * self.ysum[sl] - (self.ys[sl] + self.y_j[sl] * u)
        return raw, t, c

    def row_losses(self, theta, start: int, stop: int) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        raw, _, _ = self._raw(theta, slice(start, stop))
        if raw is None:
            return np.full(stop - start, np.nan)
        return np.minimum(raw, self.cap)

    def gradient(self, theta, m: int) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        sl = slice(0, m)
        raw, t, c = self._raw(theta, sl)
        g = expit(t - self.other[sl]) * self.ysum[sl] - self.y_j[sl]
        g[raw > self.cap] = 0.0
        dp, dq = _curves.gradient(self.family, theta[0], theta[1], self.z[sl])
        beta = theta[2]
        return np.array([
            np.mean(g * beta * dp),
            np.mean(g * beta * dq),
            np.mean(g * c),
            np.mean(g),
        ])


def _to_raw_curve(family: CurveFamily, p: float, q: float, mu: float, sd: float) -> tuple[float, float]:
    """Map standardized (a, b) back to raw regressor units."""
    if family is CurveFamily.LOGISTIC:
        return abs(p) / math.sqrt(sd), mu + sd * q
    return mu + sd * p, sd * abs(q)


def _regressor_index(model: ItemModel, regressor) -> int:
    if isinstance(regressor, str):
        try:
            return model.regressor_names.index(regressor)
        except ValueError:
            raise InputError(f"unknown regressor {regressor!r}") from None
    k = int(regressor)
    if not 0 <= k < len(model.regressors):
        raise InputError(f"regressor index {k} out of range")
    return k


def _regressor_scale(x: np.ndarray) -> tuple[float, float]:
    mu = float(x.mean())
    sd = float(x.std(ddof=1)) if len(x) > 1 else 0.0
    return mu, sd


def fit_candidate_curve(
    grid: ObservationGrid,
    cache: ScoreCache,
    regressor,
    to_state: str,
    family: CurveFamily,
    rng,
    config: FitConfig | None = None,
) -> CandidateResult:
    """Fit one new curve on ``regressor`` for ``to_state`` against cached scores."""
    config = config or FitConfig()
    rng = np.random.default_rng(rng)
    model = cache.model
    data = cache.data
    k = _regressor_index(model, regressor)
    meta = model.regressors[k]
    if meta.kind is not RegressorKind.REAL or not meta.curve_eligible:
        raise InputError(f"regressor {meta.name!r} is not eligible for curves")
    if to_state not in model.free_states:
        raise InputError(f"{to_state!r} is not a free end state of this model")
    family = CurveFamily(family)
    x = data.x[:, k]
    mu, sd = _regressor_scale(x)
    if not sd > 0:
        raise DegenerateRegressor(f"regressor {meta.name!r} is constant over the grid")
    z = (x - mu) / sd
    col = model.outcome_states.index(to_state)
    obj = CandidateObjective(z, cache.scores, data.y, col, family, cache.cap)

    center = float(z[rng.integers(len(z))])
    sign = 1.0 if rng.random() < 0.5 else -1.0
    beta0 = sign * rng.uniform(0.25, 1.0)

    def run(beta_start):
        # unit slope / width in standardized units is the regressor's own std
        p0, q0 = (1.0, center) if family is CurveFamily.LOGISTIC else (center, 1.0)
        c0 = _curves.evaluate(family, p0, q0, z)
        x0 = np.array([p0, q0, beta_start, -beta_start * float(np.mean(c0))])
        res = minimize(obj, x0, **_minimize_opts(config))
        return res.x, float(obj.row_losses(res.x, 0, obj.n_rows).mean()), res.rows_touched

    theta, nll, rows = run(beta0)
    if abs(theta[2]) < 1e-8:
        theta2, nll2, rows2 = run(-beta0)
        rows += rows2
        if nll2 < nll:
            theta, nll = theta2, nll2
    a, b = _to_raw_curve(family, theta[0], theta[1], mu, sd)
    if family is CurveFamily.GAUSSIAN and b == 0.0:
        b = np.finfo(float).tiny
    curve = CurveSpec(family, a, b, k, to_state, theta[2])
    kp = config.params_per_curve
    return CandidateResult(
        curve=curve,
        intercept_adjustment=float(theta[3]),
        neg_ll=nll,
        delta_aic=criterion_delta(kp, data.n, cache.neg_ll, nll, Criterion.AIC),
        delta_bic=criterion_delta(kp, data.n, cache.neg_ll, nll, Criterion.BIC),
        rows_touched=rows,
    )


def _cell_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _best_candidate(grid, cache, cells, config, rng_key) -> CandidateResult | None:
    """Run all cells; lowest negLL wins, ties go to the earlier cell."""

    def one(i):
        k, state, family = cells[i]
        return fit_candidate_curve(grid, cache, k, state, family, _cell_rng(config.seed, *rng_key, i), config)

    if config.threads > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(one, range(len(cells))))
    else:
        results = [one(i) for i in range(len(cells))]
    best = None
    for r in results:
        if math.isfinite(r.neg_ll) and (best is None or r.neg_ll < best.neg_ll):
            best = r
    return best


def _with_curve(model: ItemModel, cand: CandidateResult) -> ItemModel:
    per_state = dict(model.per_state)
    coef = per_state[cand.curve.to_state]
    per_state[cand.curve.to_state] = StateCoefficients(coef.intercept + cand.intercept_adjustment, coef.flag_betas)
    return replace(model, per_state=per_state, curves=model.curves + (cand.curve,))


def _cells(model: ItemModel, regressors) -> list:
    # regressor column order, then state order, then LOGISTIC before GAUSSIAN
    return [(k, s, f) for k in regressors for s in model.free_states for f in FAMILIES]


# --------------------------------------------------------------------------- #
# The greedy loop
# --------------------------------------------------------------------------- #


def _start_status(grid: ObservationGrid, config: FitConfig) -> str:
    if config.start_status is not None:
        if config.start_status not in grid.states:
            raise InputError(f"unknown start status {config.start_status!r}")
        return config.start_status
    present = sorted(set(grid.start.tolist()))
    if len(present) != 1:
        names = [grid.states[i] for i in present]
        raise InputError(f"grid has several start statuses {names}; set start_status")
    return grid.states[present[0]]


def eligible_regressors(model: ItemModel, data: ModelData) -> list[int]:
    """REAL, curve-eligible columns that are not constant over the rows."""
    out = []
    for k, m in enumerate(model.regressors):
        if m.kind is RegressorKind.REAL and m.curve_eligible:
            col = data.x[:, k]
            if data.n > 1 and col.min() < col.max():
                out.append(k)
    return out


def initial_model(grid: ObservationGrid, config: FitConfig | None = None) -> ItemModel:
    config = config or FitConfig()
    if grid.n_rows == 0:
        raise EmptyGrid("grid has no rows")
    if any(m.kind is RegressorKind.CATEGORICAL for m in grid.meta):
        raise InputError("expand categorical columns before fitting")
    start = _start_status(grid, config)
    model = ItemModel.empty(grid.space(), start, grid.meta)
    return empirical_intercepts(model, _require_rows(grid, model))


def fit(grid: ObservationGrid, config: FitConfig | None = None) -> tuple[ItemModel, FitReport]:
    """Grow a model one curve at a time until the information criterion refuses."""
    config = config or FitConfig()
    if config.noise_sd > 0:
        grid = inject_noise(grid, config.noise_sd, _cell_rng(config.seed, -1))
    model = initial_model(grid, config)
    data = _require_rows(grid, model)
    regressors = eligible_regressors(model, data)
    if config.max_curves > 0 and not regressors:
        raise NoEligibleRegressors("no non-constant REAL regressor is eligible for curves")
    report = FitReport()
    rnd = 0
    while True:
        model = fit_coefficients(model, grid, config)
        cache = score_cache(model, grid, config.ll_cap)
        if report.base_neg_ll is None:
            report.base_neg_ll = cache.neg_ll
        if len(model.curves) >= config.max_curves:
            report.reason = TerminalReason.MAX_CURVES
            break
        best = _best_candidate(grid, cache, _cells(model, regressors), config, (rnd,))
        rnd += 1
        if best is None or not best.neg_ll < cache.neg_ll:
            report.reason = TerminalReason.NO_IMPROVEMENT
            break
        delta = best.delta_aic if config.criterion is Criterion.AIC else best.delta_bic
        if not delta < 0:
            report.reason = TerminalReason.CRITERION_FAILED
            break
        model = _with_curve(model, best)
        c = best.curve
        report.entries.append(ReportEntry(model.regressors[c.regressor].name, c.to_state, c.family, c.center,
                                          c.slope, best.neg_ll, best.delta_aic, best.delta_bic))
    if config.anneal_loops > 0 and model.curves:
        model, _ = anneal(model, grid, config)
    return model, report


# --------------------------------------------------------------------------- #
# Annealing and noise
# --------------------------------------------------------------------------- #


def anneal(model: ItemModel, grid: ObservationGrid, config: FitConfig | None = None) -> tuple[ItemModel, FitReport]:
    """Drop and regrow each regressor's curves, keeping replacements that lower negLL.

    The report lists every kept replacement curve; ``neg_ll`` is the model's
    value after its whole replacement set went in and both deltas are that
    set's change (the curve count is unchanged, so no parameter charge).
    """
    config = config or FitConfig()
    data = _require_rows(grid, model)
    start_model = model
    start_nll = full_neg_ll(model, data, config.ll_cap)
    report = FitReport(base_neg_ll=start_nll)
    for loop in range(config.anneal_loops):
        model = fit_coefficients(model, grid, config)
        current = full_neg_ll(model, data, config.ll_cap)
        for k in sorted({c.regressor for c in model.curves}):
            count = sum(1 for c in model.curves if c.regressor == k)
            trial = replace(model, curves=tuple(c for c in model.curves if c.regressor != k))
            trial = fit_coefficients(trial, grid, config)
            added = []
            for i in range(count):
                cache = score_cache(trial, grid, config.ll_cap)
                best = _best_candidate(grid, cache, _cells(trial, [k]), config, (1_000_000 + loop, k, i))
                if best is None:
                    break
                trial = fit_coefficients(_with_curve(trial, best), grid, config)
                added.append(best.curve)
            if len(added) < count:
                continue
            nll = full_neg_ll(trial, data, config.ll_cap)
            if nll < current:
                d = criterion_delta(0, data.n, current, nll)
                for c in trial.curves[-count:]:
                    report.entries.append(ReportEntry(model.regressors[k].name, c.to_state, c.family, c.center,
                                                      c.slope, nll, d, d))
                model, current = trial, nll
    if full_neg_ll(model, data, config.ll_cap) > start_nll:
        return start_model, FitReport(base_neg_ll=start_nll)
    return model, report


def inject_noise(grid: ObservationGrid, sd: float, rng) -> ObservationGrid:
    """Soften targets with small gaussian noise on each row's allowed end states."""
    if not 0.0 <= sd <= 1e-3:
        raise InputError("noise sd must lie in [0, 1e-3]")
    if sd == 0.0 or grid.n_rows == 0:
        return grid
    rng = np.random.default_rng(rng)
    space = grid.space()
    allowed = np.zeros((len(grid.states), len(grid.states)), dtype=bool)
    for s, ends in space.reachable.items():
        i = grid.states.index(s)
        for e in ends:
            allowed[i, grid.states.index(e)] = True
    mask = allowed[grid.start.astype(np.int64)]
    y = grid.y + rng.normal(0.0, sd, size=grid.y.shape)
    y = np.where(mask, np.maximum(y, sd * 1e-3), 0.0)
    y /= y.sum(axis=1, keepdims=True)
    return grid.with_y(y)


def expand_categorical(grid: ObservationGrid) -> ObservationGrid:
    """Replace each categorical column by flags for all but its first observed level."""
    if not any(m.kind is RegressorKind.CATEGORICAL for m in grid.meta):
        return grid
    meta, cols = [], []
    for k, m in enumerate(grid.meta):
        col = grid.x[:, k]
        if m.kind is not RegressorKind.CATEGORICAL:
            meta.append(m)
            cols.append(col)
            continue
        codes = np.unique(col).astype(np.int64)
        if len(codes) < 2:
            raise SingleLevelCategorical(f"categorical {m.name!r} has fewer than two observed levels")
        for code in codes[1:]:
            level = m.levels[code] if code < len(m.levels) else str(code)
            meta.append(RegressorMeta(f"{m.name}={level}", RegressorKind.FLAG))
            cols.append((col == code).astype(np.float64))
    x = np.column_stack(cols) if cols else np.zeros((grid.n_rows, 0))
    return replace(grid, meta=tuple(meta), x=x)


__all__ = [
    "CandidateObjective",
    "CandidateResult",
    "CoefficientObjective",
    "ScoreCache",
    "anneal",
    "criterion_delta",
    "eligible_regressors",
    "expand_categorical",
    "fit",
    "fit_candidate_curve",
    "fit_coefficients",
    "full_neg_ll",
    "initial_model",
    "inject_noise",
    "score_cache",
]
