"""Shared fixtures: status spaces, random small models and synthetic generators."""

from __future__ import annotations

import numpy as np
import pytest

from itemfit.data import SyntheticSpec, generate_synthetic
from itemfit.model import (
    CurveSpec,
    ItemModel,
    ObservationGrid,
    RegressorKind,
    RegressorMeta,
    StateCoefficients,
    StatusSpace,
)

MORTGAGE_SPACE = StatusSpace(
    ("C", "P", "3"),
    {"C": ("C", "P", "3"), "3": ("C", "P", "3")},
    absorbing={"P"},
)


def random_model(rng: np.random.Generator, n_flags: int = 2, n_real: int = 2, n_curves: int = 3,
                 space: StatusSpace = MORTGAGE_SPACE, start: str = "C") -> ItemModel:
    """A model with random coefficients and curves; gaussian widths kept away from 0."""
    meta = [RegressorMeta(f"f{i}", RegressorKind.FLAG) for i in range(n_flags)]
    meta += [RegressorMeta(f"x{i}") for i in range(n_real)]
    model = ItemModel.empty(space, start, meta)
    per_state = {}
    for s in model.free_states:
        betas = [rng.normal(0, 0.5) if m.kind is RegressorKind.FLAG else 0.0 for m in meta]
        per_state[s] = StateCoefficients(rng.normal(-1.0, 0.5), betas)
    curves = []
    for _ in range(n_curves if n_real else 0):
        fam = "LOGISTIC" if rng.random() < 0.5 else "GAUSSIAN"
        a = rng.normal(0, 1)
        b = rng.normal(0, 1) if fam == "LOGISTIC" else rng.choice([-1, 1]) * rng.uniform(0.3, 2.0)
        curves.append(CurveSpec(fam, a, b, n_flags + rng.integers(n_real), rng.choice(model.free_states),
                                rng.normal(0, 1)))
    return model.with_coefficients(per_state).with_curves(curves)


def random_grid(rng: np.random.Generator, model: ItemModel, n: int, soft: bool = False) -> ObservationGrid:
    """Rows for ``model``: flags 0/1, reals standard normal, targets one-hot (or random simplex)."""
    cols = []
    for m in model.regressors:
        if m.kind is RegressorKind.FLAG:
            cols.append((rng.random(n) < 0.5).astype(float))
        else:
            cols.append(rng.normal(0, 1, n))
    x = np.column_stack(cols) if cols else np.zeros((n, 0))
    states = model.status_space.states
    outcomes = model.outcome_states
    idx = rng.integers(len(outcomes), size=n)
    end = [outcomes[i] for i in idx]
    grid = ObservationGrid.from_labels(model.regressors, x, [model.start_status] * n, end, states,
                                       status_space=model.status_space)
    if soft:
        y = np.zeros((n, len(states)))
        cols_out = [states.index(s) for s in outcomes]
        y[:, cols_out] = rng.dirichlet(np.ones(len(outcomes)), size=n)
        grid = grid.with_y(y)
    return grid


SIGNAL_REGRESSORS = ("age", "incentive", "noise1", "noise2", "noise3")


def two_curve_model() -> ItemModel:
    """Ground truth: a logistic on age for C->P and a gaussian bump on incentive for C->3."""
    space = StatusSpace(("C", "P", "3"), {"C": ("C", "P", "3")})
    meta = tuple(RegressorMeta(n) for n in SIGNAL_REGRESSORS)
    m = ItemModel.empty(space, "C", meta)
    zero = (0.0,) * len(meta)
    m = m.with_coefficients({"P": StateCoefficients(-3.0, zero), "3": StateCoefficients(-4.0, zero)})
    return m.with_curves([
        CurveSpec("LOGISTIC", 1.5, 0.5, 0, "P", 2.0),
        CurveSpec("GAUSSIAN", 0.0, 0.7, 1, "3", 1.5),
    ])


def two_curve_grid(n: int, seed: int) -> ObservationGrid:
    dists = {"age": ("uniform", -2.0, 2.0), "incentive": ("uniform", -2.0, 2.0)}
    return generate_synthetic(SyntheticSpec(two_curve_model(), n, seed, dists))


def noise_model() -> ItemModel:
    """Intercept-only truth over five REAL regressors that carry no signal."""
    m = two_curve_model()
    zero = (0.0,) * len(m.regressors)
    return m.with_curves([]).with_coefficients(
        {"P": StateCoefficients(-2.0, zero), "3": StateCoefficients(-3.0, zero)})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def signal_grid_small():
    return two_curve_grid(20_000, 3)


def fisher_standard_errors(obj, theta, h=1e-4):
    """Standard errors from a finite-difference Hessian of the mean objective."""
    k = len(theta)

    def f(t):
        return obj.row_losses(t, 0, obj.n_rows).mean()

    hess = np.empty((k, k))
    for i in range(k):
        for j in range(k):
            ei, ej = np.eye(k)[i] * h, np.eye(k)[j] * h
            hess[i, j] = (f(theta + ei + ej) - f(theta + ei - ej) - f(theta - ei + ej) + f(theta - ei - ej)) / (4 * h * h)
    return np.sqrt(np.diag(np.linalg.inv(hess)) / obj.n_rows)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
