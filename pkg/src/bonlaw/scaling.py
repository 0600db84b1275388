"""Closed-form Best-of-N scaling laws and their calibration.

Every law has the form ``U(N) = mu_bar + slope * sqrt(ln N)``; they differ
only in how the slope is built from the scale and the correlation terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .core import ScalingCurve, r_squared, rel_mae

SUBGAUSSIAN_C = math.sqrt(2.0)


@dataclass(frozen=True)
class ScalingLawParams:
    """Inputs of the unified and refined laws.

    ``scale`` is the composite ``sigma_bar * c`` calibrated from an oracle
    curve; use :func:`theoretical_scale` to build it from a reward spread.
    """

    mu_bar: float
    scale: float
    alpha: float = 0.0
    beta: float = 0.0
    rho_plus: float = 1.0
    rho_minus: float = 0.0
    rho_collapsed: float = 0.0

    def __post_init__(self) -> None:
        if self.scale < 0:
            raise ValueError("scale must be >= 0")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.rho_plus < 0 or self.rho_minus > 0:
            raise ValueError("need rho_plus >= 0 >= rho_minus")


def theoretical_scale(sigma_bar: float, c: float = SUBGAUSSIAN_C) -> float:
    return sigma_bar * c


def _grid(n_grid: Iterable[int]) -> np.ndarray:
    ns = np.asarray(list(n_grid), dtype=np.int64)
    if ns.size == 0 or np.any(ns < 1):
        raise ValueError("N grid must be non-empty with N >= 1")
    return ns


def sqrt_log(ns) -> np.ndarray:
    return np.sqrt(np.log(np.asarray(ns, dtype=np.float64)))


def _law(mu_bar: float, slope: float, n_grid, label: str, trials: int) -> ScalingCurve:
    ns = _grid(n_grid)
    return ScalingCurve.from_arrays(ns.tolist(), (mu_bar + slope * sqrt_log(ns)).tolist(), trials, label)


def predict_oracle(mu_bar: float, scale: float, n_grid, label: str = "oracle-law", trials: int = 1) -> ScalingCurve:
    return _law(mu_bar, scale, n_grid, label, trials)


def inner_correlation(beta: float, rho_plus: float, rho_minus: float) -> float:
    """Correlation among non-collapsed users: ``(1-beta) rho+ - beta |rho-|``."""
    return (1.0 - beta) * rho_plus - beta * abs(rho_minus)


def effective_correlation(alpha: float, beta: float, rho_plus: float, rho_minus: float) -> float:
    """Slope multiplier of the unified law, including the ``(1 - alpha)`` factor."""
    return (1.0 - alpha) * inner_correlation(beta, rho_plus, rho_minus)


def predict_unified(params: ScalingLawParams, n_grid, label: str = "unified-law", trials: int = 1) -> ScalingCurve:
    rho = effective_correlation(params.alpha, params.beta, params.rho_plus, params.rho_minus)
    return _law(params.mu_bar, rho * params.scale, n_grid, label, trials)


def refined_correlation(params: ScalingLawParams) -> float:
    inner = inner_correlation(params.beta, params.rho_plus, params.rho_minus)
    return (1.0 - params.alpha) * inner + params.alpha * params.rho_collapsed


def predict_refined(params: ScalingLawParams, n_grid, label: str = "refined-law", trials: int = 1) -> ScalingCurve:
    return _law(params.mu_bar, refined_correlation(params) * params.scale, n_grid, label, trials)


def fit_sqrt_log(curve: ScalingCurve) -> tuple[float, float]:
    """OLS fit of ``U(N) = a + b sqrt(ln N)``; returns ``(a, b)``."""
    ns = curve.ns
    if ns.size < 2:
        raise ValueError("need at least 2 points to fit")
    if np.unique(ns).size < 2:
        raise ValueError("need at least 2 distinct N values")
    x = sqrt_log(ns)
    y = curve.utilities
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    b = float(np.dot(dx, y - ym) / np.dot(dx, dx))
    a = float(ym - b * xm)
    return a, b


def calibrate_scale(oracle_curve: ScalingCurve) -> tuple[float, float]:
    """``(mu_bar, scale)`` from an observed oracle curve."""
    return fit_sqrt_log(oracle_curve)


def fitted_curve(curve: ScalingCurve, label: str | None = None) -> ScalingCurve:
    a, b = fit_sqrt_log(curve)
    return _law(a, b, curve.ns.tolist(), label or f"{curve.label}-fit", 1)


def score_prediction(pred: ScalingCurve, obs: ScalingCurve) -> tuple[float, float]:
    """``(relMAE, R^2)`` of a predicted curve against an observed one."""
    return rel_mae(pred, obs), r_squared(pred, obs)
