"""Measure collapse, hacking and correlation statistics of a scored population,
and check the distributional assumptions behind the scaling laws."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import DEGENERATE, CandidatePool, Correlation, UserDataset, pearson, spearman

COLLAPSE_THRESHOLD = 0.1


def _require_predictions(pool: CandidatePool) -> None:
    if pool.pred_mean is None:
        raise ValueError(f"pool {pool.user_id}/{pool.query_id} has no predictions")


METHODS = {"pearson": pearson, "spearman": spearman}


def _method(name: str):
    try:
        return METHODS[name]
    except KeyError:
        raise ValueError(f"unknown correlation method {name!r}") from None


def per_query_correlation(pool: CandidatePool, method: str = "pearson") -> Correlation:
    corr = _method(method)
    _require_predictions(pool)
    if len(pool) < 2:
        raise ValueError(f"pool {pool.user_id}/{pool.query_id}: need >= 2 candidates")
    return corr(pool.true_scores, pool.pred_mean)


def per_user_correlation(dataset: UserDataset, mode: str = "pooled", method: str = "pearson") -> Correlation:
    """Per-user correlation.

    ``pooled`` correlates every (true, predicted) pair of the user at once;
    ``averaged`` is the mean of the per-query correlations. ``method`` is
    ``pearson`` or ``spearman``.
    """
    corr = _method(method)
    for pool in dataset.pools:
        _require_predictions(pool)
    if mode == "pooled":
        true = np.concatenate([p.true_scores for p in dataset.pools])
        pred = np.concatenate([p.pred_mean for p in dataset.pools])
        if true.size < 2:
            raise ValueError(f"user {dataset.user_id}: need >= 2 scored candidates")
        return corr(true, pred)
    if mode == "averaged":
        rhos = [per_query_correlation(p, method) for p in dataset.pools if len(p) >= 2]
        if not rhos:
            raise ValueError(f"user {dataset.user_id}: no query with >= 2 candidates")
        if all(r.degenerate for r in rhos):
            return DEGENERATE
        return Correlation(float(np.mean([float(r) for r in rhos])))
    raise ValueError(f"unknown correlation mode {mode!r}")


@dataclass
class DiagnosticReport:
    per_user_rho: dict[str, float]
    per_query_rho: dict[tuple[str, str], float]
    alpha: float
    beta: float
    rho_plus_mean: float
    rho_minus_mean: float
    rho_collapsed_mean: float
    collapse_threshold: float = COLLAPSE_THRESHOLD
    collapsed_users: list[str] = field(default_factory=list)
    degenerate_users: list[str] = field(default_factory=list)
    n_queries_scored: int = 0  # queries of non-collapsed users
    correlation_mode: str = "pooled"
    correlation_method: str = "pearson"

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["per_user_rho"] = {k: float(v) for k, v in self.per_user_rho.items()}
        d["per_query_rho"] = {f"{u}/{q}": float(v) for (u, q), v in self.per_query_rho.items()}
        d["beta_scope"] = "queries of non-collapsed users"
        return d


def compute_report(
    datasets: Sequence[UserDataset],
    threshold: float = COLLAPSE_THRESHOLD,
    mode: str = "pooled",
    method: str = "pearson",
) -> DiagnosticReport:
    """alpha over users; beta and the mean correlations over non-collapsed users' queries."""
    if not datasets:
        raise ValueError("empty population")
    per_user: dict[str, float] = {}
    per_query: dict[tuple[str, str], float] = {}
    collapsed, degenerate = [], []
    collapsed_rhos, pos, neg = [], [], []
    for ds in datasets:
        rho_u = per_user_correlation(ds, mode, method)
        per_user[ds.user_id] = rho_u
        if rho_u.degenerate:
            degenerate.append(ds.user_id)
        is_collapsed = float(rho_u) < threshold
        if is_collapsed:
            collapsed.append(ds.user_id)
            collapsed_rhos.append(float(rho_u))
        for pool in ds.pools:
            if len(pool) < 2:
                continue
            rho_q = per_query_correlation(pool, method)
            per_query[(pool.user_id, pool.query_id)] = rho_q
            if not is_collapsed:
                (neg if float(rho_q) < 0 else pos).append(float(rho_q))
    n_q = len(pos) + len(neg)
    return DiagnosticReport(
        per_user_rho=per_user,
        per_query_rho=per_query,
        alpha=len(collapsed) / len(datasets),
        beta=len(neg) / n_q if n_q else 0.0,
        rho_plus_mean=float(np.mean(pos)) if pos else 0.0,
        rho_minus_mean=float(np.mean(neg)) if neg else 0.0,
        rho_collapsed_mean=float(np.mean(collapsed_rhos)) if collapsed_rhos else 0.0,
        collapse_threshold=threshold,
        collapsed_users=collapsed,
        degenerate_users=degenerate,
        n_queries_scored=n_q,
        correlation_mode=mode,
        correlation_method=method,
    )


# --- assumption checks -------------------------------------------------------

MGF_LAMBDAS = (0.25, 0.5, 1.0, 2.0, 4.0)


def fit_subgaussian_sigma(samples) -> float:
    """Smallest sigma with ``mean(exp(l (X - xbar))) <= exp(l^2 sigma^2 / 2)`` on the test grid.

    The test grid is ``l = +-{0.25, 0.5, 1, 2, 4} / std(X)``. For each ``l``
    the bound gives ``sigma^2 >= 2 log M(l) / l^2`` so the minimum over all
    sigma is the maximum of those ratios, found exactly rather than by scanning.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 10:
        raise ValueError("need at least 10 samples")
    centred = x - x.mean()
    sd = float(np.std(x))
    if sd <= 1e-14 * max(1.0, float(np.max(np.abs(x)))):
        return 0.0
    need = 0.0
    for base in MGF_LAMBDAS:
        for lam in (base / sd, -base / sd):
            z = lam * centred
            zmax = float(z.max())
            log_mgf = zmax + math.log(float(np.mean(np.exp(z - zmax))))
            need = max(need, 2.0 * log_mgf / (lam * lam))
    return math.sqrt(need)


@dataclass(frozen=True)
class AssumptionCheck:
    subgaussian_sigma_hat: float
    linearity_slope: float
    linearity_r2: float
    bins: int
    slope_stderr: float = float("nan")
    bin_centres: tuple[float, ...] = ()
    bin_means: tuple[float, ...] = ()


def linearity_check(pairs, bins: int = 10) -> AssumptionCheck:
    """Equal-count bins over predictions, then OLS of mean true score on bin centre.

    ``pairs`` is an (n, 2) array-like of (predicted, true).
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("pairs must be (n, 2): predicted, true")
    if bins < 3:
        raise ValueError("bins must be >= 3")
    if arr.shape[0] < 5 * bins:
        raise ValueError(f"need at least {5 * bins} pairs for {bins} bins")
    pred, true = arr[:, 0], arr[:, 1]
    order = np.argsort(pred, kind="stable")
    groups = np.array_split(order, bins)
    cx = np.array([pred[g].mean() for g in groups])
    cy = np.array([true[g].mean() for g in groups])
    dx = cx - cx.mean()
    sxx = float(np.dot(dx, dx))
    if sxx == 0.0:
        raise ValueError("predictions are constant; cannot fit a line")
    slope = float(np.dot(dx, cy - cy.mean()) / sxx)
    resid = cy - (cy.mean() + slope * dx)
    ss_res = float(np.dot(resid, resid))
    ss_tot = float(np.sum((cy - cy.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    stderr = math.sqrt(ss_res / (bins - 2) / sxx)
    return AssumptionCheck(
        subgaussian_sigma_hat=fit_subgaussian_sigma(true),
        linearity_slope=slope,
        linearity_r2=r2,
        bins=bins,
        slope_stderr=stderr,
        bin_centres=tuple(cx.tolist()),
        bin_means=tuple(cy.tolist()),
    )


def variance_error_correlation(datasets) -> Correlation:
    """Spearman correlation between predicted variance and absolute error."""
    if isinstance(datasets, UserDataset):
        datasets = [datasets]
    pools = [p for d in datasets for p in d.pools]
    for p in pools:
        _require_predictions(p)
        if p.pred_var is None:
            raise ValueError(f"pool {p.user_id}/{p.query_id} has no predicted variance")
    var = np.concatenate([p.pred_var for p in pools])
    err = np.concatenate([np.abs(p.pred_mean - p.true_scores) for p in pools])
    return spearman(var, err)


@dataclass(frozen=True)
class LabelVarianceGroup:
    group: str
    n_users: int
    mean_label_std: float
    collapse_rate: float


def label_variance_split(
    datasets: Sequence[UserDataset],
    per_user_rho: dict[str, float],
    threshold: float = COLLAPSE_THRESHOLD,
) -> list[LabelVarianceGroup]:
    """Collapse rate in the low and high halves of per-user label spread.

    With an odd user count the extra user goes to the high half.
    """
    if len(datasets) < 2:
        raise ValueError("need at least 2 users")
    stds = np.array([float(np.std(d.all_true())) for d in datasets])
    order = np.argsort(stds, kind="stable")
    half = len(datasets) // 2
    out = []
    for name, idx in (("low", order[:half]), ("high", order[half:])):
        rates = [float(per_user_rho[datasets[i].user_id]) < threshold for i in idx]
        out.append(
            LabelVarianceGroup(name, len(idx), float(stds[idx].mean()), float(np.mean(rates)))
        )
    return out
