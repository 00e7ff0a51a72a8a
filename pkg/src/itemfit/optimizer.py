"""Quasi-Newton minimisation driven by a subsampled significance test.

The objective is a mean of per-row terms. Instead of comparing two points
on the whole data set, :class:`AdaptiveComparator` sums the termwise
differences over growing prefixes (M0, 2 M0, 4 M0, ... N) and stops as soon
as the prefix mean differs from zero by more than ``C`` standard errors.
Rows scored for a point are cached, so a prefix is never recomputed.

Objectives implement :class:`RowObjective`: ``row_losses(theta, start, stop)``
returns the per-row terms for rows ``[start, stop)`` and
``gradient(theta, m)`` the gradient of the mean over the first ``m`` rows.
"""

from __future__ import annotations

import enum
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import InputError, NonFiniteObjective
from .model import resolve_m0


class RowObjective(Protocol):
    n_rows: int

    def row_losses(self, theta: np.ndarray, start: int, stop: int) -> np.ndarray: ...

    def gradient(self, theta: np.ndarray, m: int) -> np.ndarray: ...


class Outcome(enum.Enum):
    FIRST_BETTER = "FIRST_BETTER"
    SECOND_BETTER = "SECOND_BETTER"
    INDISTINGUISHABLE_AT_FULL_N = "INDISTINGUISHABLE_AT_FULL_N"


@dataclass(frozen=True)
class CompareResult:
    outcome: Outcome
    m: int
    sigma: float
    difference: float  # f_M(a) - f_M(b); negative means a is lower

    @property
    def within_sigma(self) -> bool:
        return abs(self.difference) <= self.sigma


def termwise_diff(objective: RowObjective, k: int, a, b) -> float:
    """Row ``k`` loss under ``a`` minus row ``k`` loss under ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(objective.row_losses(a, k, k + 1)[0] - objective.row_losses(b, k, k + 1)[0])


class AdaptiveComparator:
    """Decides which of two parameter points has the lower mean objective.

    A comparison still undecided once the prefix covers all N rows is
    settled by the sign of the full-data difference, except that it counts
    as a tie when the difference is within one standard error
    (``sigma_stop=True``) or exactly zero (``sigma_stop=False``). With
    ``adaptive=False`` every comparison uses all N rows.
    """

    def __init__(
        self,
        objective: RowObjective,
        c: float = 5.0,
        m0: int | None = None,
        *,
        sigma_stop: bool = True,
        adaptive: bool = True,
        cache_size: int = 8,
    ):
        if c <= 0:
            raise InputError("comparator constant must be positive")
        self.objective = objective
        self.n = int(objective.n_rows)
        if self.n < 1:
            raise InputError("objective has no rows")
        self.c = float(c)
        self.m0 = resolve_m0(self.n, m0) if adaptive else self.n
        self.m0 = min(self.m0, self.n)
        self.sigma_stop = sigma_stop
        self.adaptive = adaptive
        self.rows_touched = 0
        self.comparisons = 0
        self._cache: OrderedDict[bytes, np.ndarray] = OrderedDict()
        self._cache_size = cache_size

    def losses(self, theta, m: int) -> np.ndarray:
        """Per-row losses for the first ``m`` rows, extending any cached prefix."""
        theta = np.asarray(theta, dtype=np.float64)
        key = theta.tobytes()
        have = self._cache.pop(key, None)
        if have is None:
            have = np.empty(0)
        if len(have) < m:
            extra = np.asarray(self.objective.row_losses(theta, len(have), m), dtype=np.float64)
            self.rows_touched += m - len(have)
            have = np.concatenate([have, extra])
        self._cache[key] = have
        while len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return have[:m]

    def compare(self, a, b) -> CompareResult:
        self.comparisons += 1
        m = self.m0
        while True:
            la = self.losses(a, m)
            lb = self.losses(b, m)
            bad_a = not np.all(np.isfinite(la))
            bad_b = not np.all(np.isfinite(lb))
            if bad_a or bad_b:
                if bad_a and bad_b:
                    return CompareResult(Outcome.INDISTINGUISHABLE_AT_FULL_N, m, math.nan, math.nan)
                outcome = Outcome.SECOND_BETTER if bad_a else Outcome.FIRST_BETTER
                return CompareResult(outcome, m, math.inf, math.inf if bad_a else -math.inf)
            d = la - lb
            diff = float(d.mean())
            sigma = float(d.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0
            if abs(diff) > self.c * sigma:
                outcome = Outcome.FIRST_BETTER if diff < 0 else Outcome.SECOND_BETTER
                return CompareResult(outcome, m, sigma, diff)
            if m >= self.n:
                # the full-data difference is exact; outside the tie band it decides
                tie = abs(diff) <= sigma if self.sigma_stop else diff == 0.0
                if not tie:
                    outcome = Outcome.FIRST_BETTER if diff < 0 else Outcome.SECOND_BETTER
                    return CompareResult(outcome, m, sigma, diff)
                return CompareResult(Outcome.INDISTINGUISHABLE_AT_FULL_N, m, sigma, diff)
            m = min(2 * m, self.n)


@dataclass
class MinimizeResult:
    x: np.ndarray
    accepted_steps: int
    iterations: int
    reason: str
    rows_touched: int
    comparisons: int
    gradient_rows: int
    last_compare: CompareResult | None = None
    path: list[np.ndarray] = field(default_factory=list)


def _backtrack(t: float, slope: float, diff: float) -> float:
    """Next trial step from a quadratic through f(0), f'(0) and f(t), kept in [0.1t, 0.5t]."""
    curv = diff - slope * t
    if not (math.isfinite(curv) and curv > 0.0 and slope < 0.0):
        return 0.5 * t
    return min(0.5 * t, max(0.1 * t, -slope * t * t / (2.0 * curv)))


def minimize(
    objective: RowObjective,
    x0,
    *,
    comparator: AdaptiveComparator | None = None,
    c: float = 5.0,
    m0: int | None = None,
    sigma_stop: bool = True,
    adaptive: bool = True,
    max_iter: int = 100,
    max_backtrack: int = 30,
    max_ties: int = 4,
    keep_path: bool = False,
) -> MinimizeResult:
    """BFGS with backtracking, where every step acceptance is a comparator call.

    Gradients are taken over the largest prefix the comparator has needed so
    far; once progress stalls on a prefix the gradient is widened, and the
    run stops only when ``max_ties + 1`` successively halved steps are all
    indistinguishable from the incumbent on all N rows, or the step
    underflows with a full-data gradient.
    The returned point is the last accepted one.
    """
    comp = comparator or AdaptiveComparator(objective, c, m0, sigma_stop=sigma_stop, adaptive=adaptive)
    n = comp.n
    x = np.array(x0, dtype=np.float64)
    if not np.all(np.isfinite(comp.losses(x, comp.m0))):
        raise NonFiniteObjective("objective is not finite at the start point")
    m_grad = comp.m0
    grad_rows = 0

    def grad(point, m):
        nonlocal grad_rows
        grad_rows += m
        g = np.asarray(objective.gradient(point, m), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteObjective("gradient is not finite")
        return g

    g = grad(x, m_grad)
    dim = x.size
    hess_inv: np.ndarray | None = None
    path = [x.copy()] if keep_path else []
    accepted = 0
    reason = "max_iter"
    last: CompareResult | None = None
    it = 0
    for it in range(1, max_iter + 1):
        if hess_inv is None:
            gnorm = float(np.linalg.norm(g))
            if gnorm == 0.0:
                if m_grad < n:
                    m_grad = n
                    g = grad(x, m_grad)
                    continue
                reason = "zero_gradient"
                break
            p = -g / gnorm
        else:
            p = -hess_inv @ g
            if g @ p >= 0:
                hess_inv = None
                continue

        t = 1.0
        step_m = 0
        status = "underflow"
        ties = 0
        slope = float(g @ p)
        for _ in range(max_backtrack):
            cand = x + t * p
            last = comp.compare(cand, x)
            step_m = max(step_m, last.m)
            if last.outcome is Outcome.FIRST_BETTER:
                status = "accept"
                break
            # an overshoot can land on a point of equal value, so one tie is
            # not enough to call the search converged
            if last.outcome is Outcome.INDISTINGUISHABLE_AT_FULL_N:
                ties += 1
                if ties > max_ties:
                    status = "indistinguishable"
                    break
            else:
                ties = 0
            t = _backtrack(t, slope, last.difference)

        if status == "accept":
            if step_m > m_grad:
                m_grad = step_m
                g = grad(x, m_grad)
            g_new = grad(cand, m_grad)
            s = cand - x
            yv = g_new - g
            sy = float(s @ yv)
            if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yv)):
                if hess_inv is None:
                    hess_inv = np.eye(dim) * (sy / float(yv @ yv))
                rho = 1.0 / sy
                v = np.eye(dim) - rho * np.outer(s, yv)
                hess_inv = v @ hess_inv @ v.T + rho * np.outer(s, s)
            x, g = cand, g_new
            accepted += 1
            if keep_path:
                path.append(x.copy())
            continue

        if m_grad < n:
            m_grad = min(n, max(2 * m_grad, step_m))
            g = grad(x, m_grad)
            hess_inv = None
            continue
        if status == "underflow" and hess_inv is not None:
            hess_inv = None
            continue
        reason = status if status == "indistinguishable" else "step_underflow"
        break

    return MinimizeResult(
        x=x,
        accepted_steps=accepted,
        iterations=it,
        reason=reason,
        rows_touched=comp.rows_touched + grad_rows,
        comparisons=comp.comparisons,
        gradient_rows=grad_rows,
        last_compare=last,
        path=path,
    )
