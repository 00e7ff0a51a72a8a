"""The two response-curve families and their parameter derivatives.

Logistic CDF: ``C(x) = 1 / (1 + exp(-a**2 (x - b)))``, always increasing in x.
Gaussian bump: ``G(x) = exp(-(x - a)**2 / (2 b**2))``.

All functions broadcast over numpy arrays and return Python floats for
scalar input.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ZeroWidth
from .model import CurveFamily, CurveSpec


def _out(v):
    return float(v) if np.ndim(v) == 0 else v


def _logistic_parts(a, b, x):
    a = np.asarray(a, dtype=np.float64)
    z = a * a * (np.asarray(x, dtype=np.float64) - b)
    # expit(z) * expit(-z) avoids the cancellation in C * (1 - C) at saturation
    return z, expit(z), expit(-z)


def eval_logistic(a, b, x):
    with np.errstate(invalid="ignore", over="ignore"):
        _, c, _ = _logistic_parts(a, b, x)
    return _out(c)


def grad_logistic(a, b, x):
    """Return ``(dC/da, dC/db)``."""
    with np.errstate(invalid="ignore", over="ignore"):
        _, c, cc = _logistic_parts(a, b, x)
        a = np.asarray(a, dtype=np.float64)
        w = c * cc
        da = 2.0 * a * (np.asarray(x, dtype=np.float64) - b) * w
        db = -a * a * w
    return _out(da), _out(db)


def _check_width(b):
    if np.any(np.asarray(b) == 0):
        raise ZeroWidth("gaussian width must be nonzero")


def eval_gaussian(a, b, x):
    _check_width(b)
    u = np.asarray(x, dtype=np.float64) - a
    return _out(np.exp(-(u * u) / (2.0 * np.asarray(b, dtype=np.float64) ** 2)))


def grad_gaussian(a, b, x):
    """Return ``(dG/da, dG/db)``."""
    _check_width(b)
    b = np.asarray(b, dtype=np.float64)
    u = np.asarray(x, dtype=np.float64) - a
    g = np.exp(-(u * u) / (2.0 * b * b))
    return _out(u / (b * b) * g), _out(u * u / (b * b * b) * g)


def evaluate(family: CurveFamily, a, b, x):
    if family is CurveFamily.LOGISTIC:
        return eval_logistic(a, b, x)
    return eval_gaussian(a, b, x)


def gradient(family: CurveFamily, a, b, x):
    if family is CurveFamily.LOGISTIC:
        return grad_logistic(a, b, x)
    return grad_gaussian(a, b, x)


def eval_curve(curve: CurveSpec, x):
    return evaluate(curve.family, curve.a, curve.b, x)


def grad_curve(curve: CurveSpec, x):
    return gradient(curve.family, curve.a, curve.b, x)
