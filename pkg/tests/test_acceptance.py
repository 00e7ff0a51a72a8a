"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, printed at the end of the run.
"""

import math
import time

import numpy as np
import pytest
from scipy.optimize import minimize as scipy_minimize

from conftest import ACCEPTANCE_LINES, noise_model, random_grid, random_model, two_curve_grid, two_curve_model
from itemfit.data import SyntheticSpec, generate_synthetic
from itemfit.fitter import CoefficientObjective, criterion_delta, fit
from itemfit.likelihood import (
    inverse_logit,
    mean_neg_ll,
    model_data,
    model_parameters,
    model_with_parameters,
    neg_ll_gradient,
    softmax,
)
from itemfit.model import (
    Criterion,
    CurveSpec,
    FitConfig,
    ItemModel,
    StateCoefficients,
    StatusSpace,
    save_model,
)
from itemfit.optimizer import minimize
from itemfit.projection import (
    ItemTransitionModel,
    MarkovTransitionModel,
    allocate_paths,
    project_hybrid,
    project_matrix,
)


def record(n: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


def _sigma(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return float(d.std(ddof=1) / math.sqrt(len(d)))


class CountingObjective:
    """Counts rows handed to ``row_losses`` and ``gradient``."""

    def __init__(self, inner):
        self.inner = inner
        self.n_rows = inner.n_rows
        self.rows = 0

    def row_losses(self, theta, start, stop):
        self.rows += stop - start
        return self.inner.row_losses(theta, start, stop)

    def gradient(self, theta, m):
        self.rows += m
        return self.inner.gradient(theta, m)


@pytest.fixture(scope="module")
def recovery_run():
    grid = two_curve_grid(200_000, 1)
    started = time.perf_counter()
    model, report = fit(grid, FitConfig(seed=0))
    return grid, model, report, time.perf_counter() - started


@pytest.fixture(scope="module")
def noise_runs():
    runs = []
    for seed in range(20):
        grid = generate_synthetic(SyntheticSpec(noise_model(), 100_000, seed))
        runs.append(fit(grid, FitConfig(seed=seed)))
    return runs


def test_01_gradient_matches_finite_differences():
    started = time.perf_counter()
    worst = 0.0
    h = 1e-6
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        model = random_model(rng, n_curves=3)
        grid = random_grid(rng, model, 40, soft=seed % 2 == 1)
        analytic = neg_ll_gradient(grid, model).flat()
        theta = model_parameters(model)
        numeric = np.empty_like(theta)
        for i in range(len(theta)):
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            numeric[i] = (mean_neg_ll(grid, model_with_parameters(model, up))
                          - mean_neg_ll(grid, model_with_parameters(model, dn))) / (2 * h)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)))
    elapsed = time.perf_counter() - started
    ok = worst <= 1e-5 and elapsed < 60
    record(1, ok, f"100 models, worst relative gradient error {worst:.2e} (limit 1e-5), {elapsed:.1f}s")
    assert ok


def test_02_softmax_invariants():
    rng = np.random.default_rng(2)
    v = rng.normal(0, 5, size=(10_000, 4))
    shift = rng.normal(0, 50, size=(10_000, 1))
    shift_err = float(np.abs(softmax(v + shift) - softmax(v)).max())
    big = softmax(np.array([1000.0, 0.0, -1000.0]))
    no_nan = bool(np.all(np.isfinite(big))) and big[0] == 1.0
    y = rng.dirichlet(np.ones(4), size=10_000)
    trip_err = float(np.abs(softmax(inverse_logit(y)) - y).max())
    ok = shift_err <= 1e-12 and no_nan and trip_err <= 1e-12
    record(2, ok, f"shift error {shift_err:.1e}, finite at score 1000: {no_nan}, round-trip error {trip_err:.1e}")
    assert ok


def test_03_aic_bic_constant():
    gap = criterion_delta(3, 10**6, 0.2, 0.2, Criterion.BIC) - criterion_delta(3, 10**6, 0.2, 0.2, Criterion.AIC)
    ok = abs(gap - 35.45) <= 0.01
    record(3, ok, f"deltaBIC - deltaAIC = {gap:.4f} at k=3, N=1e6 (target 35.45 +/- 0.01)")
    assert ok


def test_04_synthetic_recovery(recovery_run):
    grid, model, report, elapsed = recovery_run
    names = {model.regressors[c.regressor].name for c in model.curves}
    final = mean_neg_ll(grid, model)
    entropy = grid.metadata["generator_entropy"]
    ok = {"age", "incentive"} <= names and abs(final - entropy) <= 5e-3 and elapsed < 300
    record(4, ok, f"curves on {sorted(names)}, negLL {final:.5f} vs generator entropy {entropy:.5f} "
                  f"(|diff| {abs(final - entropy):.1e}, limit 5e-3), {elapsed:.0f}s")
    assert ok


def test_05_overfitting_resistance(noise_runs):
    clean = sum(1 for model, _ in noise_runs if not model.curves)
    ok = clean >= 19
    record(5, ok, f"{clean}/20 pure-noise fits accepted no curve (need >= 19), AIC, N=1e5")
    assert ok


def test_06_adaptive_matches_full_reference():
    grid = two_curve_grid(200_000, 1)
    truth = two_curve_model()
    zero = (0.0,) * len(truth.regressors)
    start = truth.with_coefficients({"P": StateCoefficients(0.0, zero), "3": StateCoefficients(0.0, zero)})
    start = start.with_curves([CurveSpec(c.family, c.a, c.b, c.regressor, c.to_state, 0.0) for c in truth.curves])
    inner = CoefficientObjective(start, model_data(grid, start))
    n = inner.n_rows
    x0 = inner.initial()

    adaptive = CountingObjective(inner)
    res = minimize(adaptive, x0)

    full = CountingObjective(inner)
    ref = scipy_minimize(lambda th: (full.row_losses(th, 0, n).mean(), full.gradient(th, n)), x0, jac=True,
                         method="L-BFGS-B")

    f_start = inner.row_losses(x0, 0, n)
    f_end = inner.row_losses(res.x, 0, n)
    f_ref = inner.row_losses(ref.x, 0, n)
    gap = float(f_end.mean() - f_ref.mean())
    sigma = _sigma(f_start, f_end)
    ok = gap <= sigma and adaptive.rows < full.rows
    record(6, ok, f"adaptive - reference negLL {gap:.2e} (sigma(start,end,N) {sigma:.2e}); rows "
                  f"{adaptive.rows:,} adaptive vs {full.rows:,} full-data L-BFGS-B")
    assert ok


def test_07_hybrid_matches_matrix():
    space = StatusSpace(("C", "P", "3"), {"C": ("C", "P", "3"), "3": ("C", "P", "3")}, {"P"})
    m = np.array([[0.96, 0.025, 0.015], [0.0, 1.0, 0.0], [0.3, 0.1, 0.6]])
    horizon, sims = 120, 100_000
    started = time.perf_counter()
    hybrid = project_hybrid(MarkovTransitionModel(space, m), horizon, sims, 7)
    exact = project_matrix(MarkovTransitionModel(space, m), "C", horizon)
    elapsed = time.perf_counter() - started
    tv = float((0.5 * np.abs(hybrid.probabilities - exact.probabilities).sum(axis=1)).max())
    per_path = hybrid.rows_evaluated / sims
    budget = len(space.states) * horizon
    ok = tv <= 0.01 and per_path < budget and elapsed < 120
    record(7, ok, f"max TV {tv:.1e} over t <= 120; {per_path:.1f} rows per path vs m*tau = {budget}; "
                  f"{elapsed:.1f}s")
    assert ok


def test_08_allocation_fairness():
    w = np.random.default_rng(8).uniform(0.0, 1.0, 20)
    q, runs = 5, 10_000
    counts = np.array([allocate_paths(w, q, rng=s).counts for s in range(runs)])
    eps = w.sum() / (len(w) * q)
    target = w / eps
    mean = counts.mean(axis=0)
    se = counts.std(axis=0, ddof=1) / math.sqrt(runs)
    dev = np.abs(mean - target)
    spread = se > 0
    fair = bool(np.all(dev[spread] <= 3 * se[spread]) and np.all(dev[~spread] == 0))
    worst_z = float(np.max(dev[spread] / se[spread])) if spread.any() else 0.0
    # loans that got the same count in every run cannot be judged by z-score
    fixed_off = int(np.sum(dev[~spread] > 0))

    det = allocate_paths(w, q, deterministic=True)
    equal = allocate_paths(np.full(6, 0.4), q, deterministic=True)
    exact = (np.array_equal(det.counts, np.ceil(w / det.epsilon - 1e-9))
             and np.all(np.abs(det.counts - target) < 1) and np.all(equal.counts == q))
    ok = fair and bool(exact)
    record(8, ok, f"random loop over {runs} runs: worst |mean - w/eps| = {worst_z:.0f} std. errors (limit 3), "
                  f"{fixed_off} loans with a constant wrong count; deterministic variant exact: {bool(exact)}")
    assert ok


def test_09_monotone_reports(recovery_run, noise_runs, signal_grid_small):
    runs = [(recovery_run[2], Criterion.AIC)] + [(r, Criterion.AIC) for _, r in noise_runs]
    runs.append((fit(signal_grid_small, FitConfig(seed=2, criterion="BIC"))[1], Criterion.BIC))
    reports = [r for r, _ in runs]
    bad = 0
    for report, crit in runs:
        nll = [report.base_neg_ll] + [e.neg_ll for e in report.entries]
        monotone = all(b <= a for a, b in zip(nll, nll[1:]))
        deltas = [e.delta_aic if crit is Criterion.AIC else e.delta_bic for e in report.entries]
        bad += not (monotone and all(d < 0 for d in deltas))
    n_entries = sum(len(r.entries) for r in reports)
    ok = bad == 0
    record(9, ok, f"{len(reports)} reports, {n_entries} accepted curves, {bad} with a rising negLL "
                  "or a non-negative delta")
    assert ok


def _pipeline(grid, out):
    model, report = fit(grid, FitConfig(seed=4))
    save_model(model, out / "model.json")
    report.write_csv(out / "report.csv")
    meta = model.regressors
    zero = (0.0,) * len(meta)
    delinquent = ItemModel.empty(model.status_space, "3", meta).with_coefficients(
        {"C": StateCoefficients(-1.0, zero), "P": StateCoefficients(-2.0, zero)})
    path = {m.name: np.linspace(-1.5, 1.5, 24) for m in meta}
    tm = ItemTransitionModel([model, delinquent], path)
    project_hybrid(tm, 24, 5_000, 9).write_csv(out / "projection.csv")
    return [(out / name).read_bytes() for name in ("model.json", "report.csv", "projection.csv")]


def test_10_determinism(tmp_path):
    space = StatusSpace(("C", "P", "3"), {"C": ("C", "P", "3"), "3": ("C", "P", "3")}, {"P"})
    truth = two_curve_model()
    truth = ItemModel(space, "C", truth.reference_state, truth.regressors, truth.per_state, truth.curves)
    grid = generate_synthetic(SyntheticSpec(truth, 20_000, 6, {"age": ("uniform", -2, 2),
                                                               "incentive": ("uniform", -2, 2)}))
    first, second = tmp_path / "a", tmp_path / "b"
    first.mkdir()
    second.mkdir()
    same = [a == b for a, b in zip(_pipeline(grid, first), _pipeline(grid, second))]
    ok = all(same)
    record(10, ok, f"model/report/projection byte-identical across two runs: {same}")
    assert ok
