"""Power scores, softmax, the capped log-likelihood and its analytic gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import curves as _curves
from .errors import InputError, ZeroProbability
from .model import CurveFamily, CurveSpec, ItemModel, ObservationGrid, StateCoefficients


def softmax(v):
    """Row-wise softmax with the largest score subtracted first."""
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def inverse_logit(y, ref_index: int = 0):
    """Scores ``ln(y / y[ref])``; the reference entry comes back as exactly 0."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ZeroProbability("inverse_logit needs strictly positive probabilities")
    v = np.log(y) - np.log(y[..., ref_index : ref_index + 1])
    v[..., ref_index] = 0.0
    return v


# --------------------------------------------------------------------------- #
# Scores
# --------------------------------------------------------------------------- #


def _coefficient_arrays(model: ItemModel):
    """Intercepts (R,) and betas (R, K) with a zero row for the reference."""
    outcomes = model.outcome_states
    k = len(model.regressors)
    intercepts = np.zeros(len(outcomes))
    betas = np.zeros((len(outcomes), k))
    for j, s in enumerate(outcomes):
        if s == model.reference_state:
            continue
        coef = model.per_state[s]
        intercepts[j] = coef.intercept
        betas[j] = coef.flag_betas
    return intercepts, betas


def score_matrix(model: ItemModel, x) -> np.ndarray:
    """Power scores for each row of ``x`` (n x K), columns in ``model.outcome_states`` order."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != len(model.regressors):
        raise InputError(f"rows have {x.shape[1]} values, model expects {len(model.regressors)}")
    intercepts, betas = _coefficient_arrays(model)
    s = x @ betas.T + intercepts
    outcomes = model.outcome_states
    for c in model.curves:
        s[:, outcomes.index(c.to_state)] += c.beta * _curves.evaluate(c.family, c.a, c.b, x[:, c.regressor])
    s[:, model.reference_index] = 0.0
    return s


def power_scores(model: ItemModel, row) -> np.ndarray:
    """Scores for a single regressor row; the reference entry is 0."""
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise InputError("power_scores takes a single row; use score_matrix for many")
    return score_matrix(model, row)[0]


def predict_proba(model: ItemModel, x) -> np.ndarray:
    return softmax(score_matrix(model, x))


# --------------------------------------------------------------------------- #
# Grid views
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class ModelData:
    """The grid rows a model applies to, with targets restricted to its outcomes."""

    rows: np.ndarray
    x: np.ndarray
    y: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[0]


def model_data(grid: ObservationGrid, model: ItemModel) -> ModelData:
    if model.start_status not in grid.states:
        rows = np.zeros(0, dtype=np.int64)
    else:
        rows = np.flatnonzero(grid.start == grid.states.index(model.start_status))
    if grid.names != model.regressor_names:
        raise InputError(f"grid columns {grid.names} do not match model regressors {model.regressor_names}")
    try:
        cols = [grid.states.index(s) for s in model.outcome_states]
    except ValueError:
        raise InputError(f"grid states {grid.states} do not cover {model.outcome_states}") from None
    if len(rows) == grid.n_rows:
        x = np.asarray(grid.x)
        y = grid.y[:, cols]
    else:
        x = grid.x[rows]
        y = grid.y[rows][:, cols]
    return ModelData(rows=rows, x=x, y=y)


def row_neg_ll(scores: np.ndarray, y: np.ndarray, cap: float = np.inf):
    """Per-row ``-y . ln softmax(s)`` capped at ``cap``.

    Returns ``(losses, capped)`` where ``capped`` marks rows that hit the cap.
    """
    lse = logsumexp(scores, axis=1)
    raw = lse * y.sum(axis=1) - np.einsum("ij,ij->i", y, scores)
    capped = raw > cap
    return np.where(capped, cap, raw), capped


def mean_neg_ll(grid: ObservationGrid, model: ItemModel, cap: float = 20.0) -> float:
    data = model_data(grid, model)
    if data.n == 0:
        raise InputError(f"no rows start in {model.start_status!r}")
    losses, _ = row_neg_ll(score_matrix(model, data.x), data.y, cap)
    return float(losses.mean())


# --------------------------------------------------------------------------- #
# Gradient
# --------------------------------------------------------------------------- #


@dataclass
class ModelGradient:
    """Gradient of the mean negLL. State axes follow ``model.free_states``."""

    intercepts: np.ndarray
    flag_betas: np.ndarray
    curve_beta: np.ndarray
    curve_a: np.ndarray
    curve_b: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [self.intercepts, self.flag_betas.ravel(), self.curve_beta, self.curve_a, self.curve_b]
        )


def score_gradient(scores: np.ndarray, y: np.ndarray, cap: float = np.inf) -> np.ndarray:
    """d(row loss)/d(scores) = L*sum(y) - y, zeroed on capped rows."""
    _, capped = row_neg_ll(scores, y, cap)
    g = softmax(scores) * y.sum(axis=1, keepdims=True) - y
    g[capped] = 0.0
    return g


def neg_ll_gradient(grid: ObservationGrid, model: ItemModel, cap: float = 20.0) -> ModelGradient:
    data = model_data(grid, model)
    n = data.n
    if n == 0:
        raise InputError(f"no rows start in {model.start_status!r}")
    g = score_gradient(score_matrix(model, data.x), data.y, cap)
    outcomes = model.outcome_states
    free_idx = [outcomes.index(s) for s in model.free_states]
    gf = g[:, free_idx]
    grad_int = gf.mean(axis=0)
    grad_flag = gf.T @ data.x / n
    nc = len(model.curves)
    gb, ga, gw = np.zeros(nc), np.zeros(nc), np.zeros(nc)
    for i, c in enumerate(model.curves):
        col = g[:, outcomes.index(c.to_state)]
        xk = data.x[:, c.regressor]
        gb[i] = np.mean(col * _curves.evaluate(c.family, c.a, c.b, xk))
        da, db = _curves.gradient(c.family, c.a, c.b, xk)
        ga[i] = np.mean(col * c.beta * da)
        gw[i] = np.mean(col * c.beta * db)
    return ModelGradient(grad_int, grad_flag, gb, ga, gw)


def model_parameters(model: ItemModel) -> np.ndarray:
    """All parameters in the same order as :meth:`ModelGradient.flat`."""
    free = model.free_states
    intercepts = np.array([model.per_state[s].intercept for s in free])
    betas = np.array([model.per_state[s].flag_betas for s in free]).reshape(len(free), len(model.regressors))
    cb = np.array([c.beta for c in model.curves])
    ca = np.array([c.a for c in model.curves])
    cw = np.array([c.b for c in model.curves])
    return np.concatenate([intercepts, betas.ravel(), cb, ca, cw])


def model_with_parameters(model: ItemModel, theta) -> ItemModel:
    theta = np.asarray(theta, dtype=np.float64)
    free = model.free_states
    r, k, nc = len(free), len(model.regressors), len(model.curves)
    if theta.shape != (r + r * k + 3 * nc,):
        raise InputError("parameter vector has the wrong length")
    intercepts = theta[:r]
    betas = theta[r : r + r * k].reshape(r, k)
    off = r + r * k
    per_state = {s: StateCoefficients(intercepts[i], tuple(betas[i])) for i, s in enumerate(free)}
    new_curves = [
        CurveSpec(c.family, theta[off + nc + i], theta[off + 2 * nc + i], c.regressor, c.to_state, theta[off + i])
        for i, c in enumerate(model.curves)
    ]
    return ItemModel(model.status_space, model.start_status, model.reference_state, model.regressors, per_state,
                     tuple(new_curves))


__all__ = [
    "CurveFamily",
    "ModelData",
    "ModelGradient",
    "inverse_logit",
    "mean_neg_ll",
    "model_data",
    "model_parameters",
    "model_with_parameters",
    "neg_ll_gradient",
    "power_scores",
    "predict_proba",
    "row_neg_ll",
    "score_gradient",
    "score_matrix",
    "softmax",
]
