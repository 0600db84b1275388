"""End-to-end experiment recipes.

Each recipe takes a resolved :class:`ExperimentConfig` and returns the output
files as ``{relative path: bytes}``; the runner writes them. Nothing here
depends on the thread count except wall time.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

from ..core import CandidatePool, ScalingCurve, UserDataset, r_squared, rel_mae
from ..diagnostics import (
    compute_report,
    fit_subgaussian_sigma,
    label_variance_split,
    linearity_check,
    variance_error_correlation,
)
from ..prm import failure_mode_experiment, score_pools, split_pools, train_user_rm
from ..scaling import (
    ScalingLawParams,
    effective_correlation,
    fit_sqrt_log,
    fitted_curve,
    predict_oracle,
    predict_refined,
    predict_unified,
    refined_correlation,
    theoretical_scale,
)
from ..selection import CurveRequest, PackedPools, Strategy, estimate_utility_curve
from ..synth import bivariate_population, generate_feature_user, generate_population
from .config import ExperimentConfig, failure_train_configs
from .io import curves_csv, ingest_scores_csv, json_bytes, scores_csv, table_csv

Files = dict[str, bytes]
_EVAL_TAG = 0x4556


class RecipeError(RuntimeError):
    """A recipe could not run on the given data (CLI exit code 1)."""


def _curve(cfg: ExperimentConfig, data, strategy: Strategy, label: str | None = None, req: CurveRequest | None = None) -> ScalingCurve:
    return estimate_utility_curve(
        data, strategy, req or cfg.curve, threads=cfg.threads, backend=cfg.backend, label=label
    )


def _fit_summary(curve: ScalingCurve) -> dict:
    a, b = fit_sqrt_log(curve)
    fit = fitted_curve(curve)
    return {"a": a, "b": b, "r_squared": r_squared(fit, curve), "rel_mae": rel_mae(fit, curve)}


def _all_true(datasets) -> np.ndarray:
    return np.concatenate([d.all_true() for d in datasets])


def _report_tables(report) -> Files:
    per_user = table_csv(
        ("user_id", "rho_u", "collapsed", "degenerate"),
        (
            (u, float(r), u in report.collapsed_users, u in report.degenerate_users)
            for u, r in report.per_user_rho.items()
        ),
    )
    collapsed = set(report.collapsed_users)
    per_query = table_csv(
        ("user_id", "query_id", "rho_q", "user_collapsed", "hacked"),
        (
            (u, q, float(r), u in collapsed, u not in collapsed and float(r) < 0)
            for (u, q), r in report.per_query_rho.items()
        ),
    )
    return {"report.json": json_bytes(report.to_json_dict()), "per_user.csv": per_user, "per_query.csv": per_query}


# --- recipes -----------------------------------------------------------------


def simulate_oracle(cfg: ExperimentConfig) -> Files:
    spec = cfg.population
    pop = generate_population(spec, threads=cfg.threads)
    oracle = _curve(cfg, pop.users, Strategy("oracle"), "oracle")
    fit = _fit_summary(oracle)
    bound_scale = theoretical_scale(spec.base_reward.sigma)
    bound = predict_oracle(spec.base_reward.mean, bound_scale, cfg.curve.n_grid, "subgaussian-bound", cfg.curve.trials)
    true = _all_true(pop.users)
    summary = {
        **fit,
        "mu_bar_measured": float(true.mean()),
        "sigma_bar_measured": float(true.std()),
        "reward_mean": spec.base_reward.mean,
        "reward_sigma": spec.base_reward.sigma,
        "bound_scale": bound_scale,
        "b_below_bound": fit["b"] <= bound_scale,
    }
    curves = [oracle, fitted_curve(oracle, "oracle-fit"), bound]
    return {"curves.csv": curves_csv(curves), "fit.json": json_bytes(summary)}


def simulate_correlation(cfg: ExperimentConfig) -> Files:
    spec = cfg.population
    rows, curves = [], []
    b_oracle = None
    oracle_fit = None
    for rho in cfg.sections["correlation"]["rhos"]:
        users = bivariate_population(
            spec.n_users, spec.queries_per_user, spec.candidates_per_query,
            spec.base_reward, rho, spec.seed, spec.pred_sigma,
        )
        packed = PackedPools.pack(users)
        if b_oracle is None:
            oracle = _curve(cfg, packed, Strategy("oracle"), "oracle")
            oracle_fit = _fit_summary(oracle)
            b_oracle = oracle_fit["b"]
            curves.append(oracle)
        observed = _curve(cfg, packed, Strategy("mean"), f"mean@rho={rho!r}")
        curves.append(observed)
        a, b = fit_sqrt_log(observed)
        rows.append(
            {
                "rho": rho,
                "a": a,
                "b": b,
                "predicted_b": rho * b_oracle,
                "ratio": b / b_oracle if b_oracle else float("nan"),
                "slope_sign": int(np.sign(b)),
            }
        )
    summary = {"oracle": oracle_fit, "b_oracle": b_oracle, "rows": rows}
    return {"curves.csv": curves_csv(curves), "slopes.json": json_bytes(summary)}


def validate_unified_law(cfg: ExperimentConfig) -> Files:
    spec = cfg.population
    pop = generate_population(spec, threads=cfg.threads)
    sec = cfg.sections["unified"]
    report = compute_report(pop.users, threshold=sec["threshold"], mode=sec["mode"], method=sec["method"])
    packed = PackedPools.pack(pop.users)
    oracle = _curve(cfg, packed, Strategy("oracle"), "oracle")
    observed = _curve(cfg, packed, Strategy("mean"), "observed-mean")
    _, scale = fit_sqrt_log(oracle)
    mu_bar = float(_all_true(pop.users).mean())
    params = ScalingLawParams(
        mu_bar=mu_bar,
        scale=scale,
        alpha=report.alpha,
        beta=report.beta,
        rho_plus=report.rho_plus_mean,
        rho_minus=report.rho_minus_mean,
        rho_collapsed=report.rho_collapsed_mean,
    )
    n = cfg.curve.n_grid
    unified = predict_unified(params, n, "unified-law", cfg.curve.trials)
    refined = predict_refined(params, n, "refined-law", cfg.curve.trials)
    metrics = {
        "rel_mae": rel_mae(unified, observed),
        "r_squared": r_squared(unified, observed),
        "refined_rel_mae": rel_mae(refined, observed),
        "refined_r_squared": r_squared(refined, observed),
        "mu_bar": mu_bar,
        "scale": scale,
        "rho_eff": effective_correlation(params.alpha, params.beta, params.rho_plus, params.rho_minus),
        "rho_refined": refined_correlation(params),
        "measured": {
            "alpha": report.alpha,
            "beta": report.beta,
            "rho_plus": report.rho_plus_mean,
            "rho_minus": report.rho_minus_mean,
            "rho_collapsed": report.rho_collapsed_mean,
        },
        "generating": {
            "alpha": spec.collapse_fraction,
            "beta": spec.hacking_fraction,
            "rho_plus": spec.rho_plus,
            "rho_minus": spec.rho_minus,
            "rho_collapsed": spec.rho_collapsed,
        },
    }
    files = {"curves.csv": curves_csv([oracle, observed, unified, refined]), "metrics.json": json_bytes(metrics)}
    files.update(_report_tables(report))
    return files


def _datasets_or_population(cfg: ExperimentConfig, section: str):
    path = cfg.input_path(section)
    if path is not None:
        return ingest_scores_csv(path), str(path.name)
    return list(generate_population(cfg.population, threads=cfg.threads).users), "synthetic"


def diagnose(cfg: ExperimentConfig) -> Files:
    datasets, source = _datasets_or_population(cfg, "diagnose")
    sec = cfg.sections["diagnose"]
    if not all(p.pred_mean is not None for d in datasets for p in d.pools):
        raise RecipeError("diagnose needs pred_mean for every candidate")
    report = compute_report(datasets, threshold=sec["threshold"], mode=sec["mode"], method=sec["method"])
    files = _report_tables(report)

    true = _all_true(datasets)
    pred = np.concatenate([p.pred_mean for d in datasets for p in d.pools])
    checks: dict = {"source": source, "subgaussian_sigma_hat": fit_subgaussian_sigma(true) if true.size >= 10 else None}
    if true.size >= 5 * sec["bins"] and np.ptp(pred) > 0:
        lin = linearity_check(np.column_stack([pred, true]), bins=sec["bins"])
        checks["linearity"] = {
            "slope": lin.linearity_slope,
            "slope_stderr": lin.slope_stderr,
            "r_squared": lin.linearity_r2,
            "bin_centres": list(lin.bin_centres),
            "bin_means": list(lin.bin_means),
        }
    else:
        checks["linearity"] = None
    if all(p.pred_var is not None for d in datasets for p in d.pools):
        checks["variance_error_spearman"] = float(variance_error_correlation(datasets))
    if len(datasets) >= 2:
        checks["label_variance_split"] = [
            vars(g) for g in label_variance_split(datasets, report.per_user_rho, sec["threshold"])
        ]
    files["assumptions.json"] = json_bytes(checks)
    return files


def _map(cfg: ExperimentConfig, fn: Callable, jobs: list) -> list:
    if cfg.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def _feature_datasets(cfg: ExperimentConfig, section: str) -> list[UserDataset]:
    path = cfg.input_path(section)
    if path is not None:
        datasets = ingest_scores_csv(path)
        if not all(p.features is not None for d in datasets for p in d.pools):
            raise RecipeError(f"{path.name}: training needs feature columns f0..f{{d-1}}")
        return datasets
    return [generate_feature_user(cfg.feature_user, i, cfg.seed) for i in range(cfg.n_feature_users)]


def _train_and_score(cfg: ExperimentConfig, datasets, eval_fraction: float):
    def job(args):
        i, ds = args
        train, held = split_pools(ds.pools, eval_fraction, cfg.seed + i, _EVAL_TAG)
        if not held:
            raise RecipeError(f"user {ds.user_id}: needs at least 2 queries")
        model, hist = train_user_rm(train, cfg.train)
        return model, hist, score_pools(model, held)

    return _map(cfg, job, list(enumerate(datasets)))


def _strip_features(pools) -> tuple[CandidatePool, ...]:
    return tuple(CandidatePool(p.user_id, p.query_id, p.true_scores, p.pred_mean, p.pred_var) for p in pools)


def train_prm(cfg: ExperimentConfig) -> Files:
    datasets = _feature_datasets(cfg, "prm")
    results = _train_and_score(cfg, datasets, cfg.sections["prm"]["eval_fraction"])
    files: Files = {}
    history_rows, users, scored = [], [], []
    for i, (ds, (model, hist, pools)) in enumerate(zip(datasets, results)):
        name = f"models/user_{i:04d}.json"
        files[name] = (model.to_json() + "\n").encode("utf-8")
        for e in hist.epochs:
            history_rows.append((ds.user_id, e.epoch, e.train_loss, e.train_sample_loss, e.train_contrast_loss, e.val_loss))
        scored.append(UserDataset(ds.user_id, _strip_features(pools)))
        users.append(
            {
                "user_id": ds.user_id,
                "model_file": name,
                "best_epoch": hist.best_epoch,
                "stop_epoch": hist.stop_epoch,
                "stopped_early": hist.stopped_early,
                "mean_pred_var": float(np.mean(np.concatenate([p.pred_var for p in pools]))),
            }
        )
    report = compute_report(scored)
    files["history.csv"] = table_csv(
        ("user_id", "epoch", "train_loss", "train_sample", "train_contrast", "val_loss"), history_rows
    )
    files["scores.csv"] = scores_csv(scored)
    files["summary.json"] = json_bytes(
        {
            "loss_kind": cfg.train.loss_kind,
            "users": users,
            "held_out": {
                "alpha": report.alpha,
                "beta": report.beta,
                "per_user_rho": {k: float(v) for k, v in report.per_user_rho.items()},
            },
        }
    )
    return files


def failure_experiment(cfg: ExperimentConfig) -> Files:
    mse, nll = failure_train_configs(cfg)
    res = failure_mode_experiment(cfg.failure, mse, nll, threads=cfg.threads)
    th = cfg.failure.threshold
    low = set(res.low_users)
    rows = [
        (u, "low" if u in low else "normal", res.rho_u_mse[u], res.rho_u_nll[u],
         res.rho_u_mse[u] < th, res.rho_u_nll[u] < th)
        for u in res.low_users + res.normal_users
    ]
    summary = res.to_json_dict()
    summary["table"] = res.table()
    summary["checks"] = {
        "alpha_nll_below_mse": res.alpha_nll < res.alpha_mse,
        "beta_nll_not_above_mse": res.beta_nll <= res.beta_mse,
        "var_low_above_normal": res.mean_var_low_nll > res.mean_var_normal_nll,
    }
    return {
        "failure.json": json_bytes(summary),
        "per_user.csv": table_csv(
            ("user_id", "group", "rho_mse", "rho_nll", "collapsed_mse", "collapsed_nll"), rows
        ),
    }


def strategies(cfg: ExperimentConfig) -> Files:
    sec = cfg.sections["strategies"]
    path = cfg.input_path("strategies")
    if path is not None:
        datasets = ingest_scores_csv(path)
        source = path.name
    else:
        results = _train_and_score(cfg, _feature_datasets(cfg, "strategies"), sec["eval_fraction"])
        datasets = [
            UserDataset(pools[0].user_id, _strip_features(pools)) for _, _, pools in results
        ]
        source = "synthetic"
    smallest = min(len(p) for d in datasets for p in d.pools)
    if cfg.curve.n_grid[-1] > smallest:
        raise RecipeError(f"N={cfg.curve.n_grid[-1]} exceeds the smallest pool ({smallest} candidates)")
    packed = PackedPools.pack(datasets)
    curves, rows = [], []
    for s in cfg.strategies:
        try:
            c = _curve(cfg, packed, s)
        except ValueError as exc:
            raise RecipeError(str(exc)) from None
        curves.append(c)
        a, b = fit_sqrt_log(c)
        rows.append({"strategy": str(s), "a": a, "b": b, "n": c.ns.tolist(), "utility": c.utilities.tolist()})
    summary = {"source": source, "n_users": len(datasets), "n_pools": packed.n_pools, "strategies": rows}
    return {"curves.csv": curves_csv(curves), "summary.json": json_bytes(summary)}


def ingest_check(cfg: ExperimentConfig) -> Files:
    path = cfg.input_path("ingest")
    datasets = ingest_scores_csv(path)
    pools = [p for d in datasets for p in d.pools]
    sizes = [len(p) for p in pools]
    true = _all_true(datasets)
    feats = pools[0].features
    summary = {
        "file": path.name,
        "n_users": len(datasets),
        "n_pools": len(pools),
        "n_candidates": int(sum(sizes)),
        "pool_size_min": min(sizes),
        "pool_size_max": max(sizes),
        "has_pred_mean": pools[0].pred_mean is not None,
        "has_pred_var": pools[0].pred_var is not None,
        "feature_dim": 0 if feats is None else int(feats.shape[1]),
        "true_score_mean": float(true.mean()),
        "true_score_std": float(true.std()),
        "usable_strategies": sorted(
            str(Strategy.parse(t)) for t in ("oracle", "random", "mean", "lcb:0.5", "ucb:0.5", "varfilter:0.2", "snr")
            if (not Strategy.parse(t).needs_mean or pools[0].pred_mean is not None)
            and (not Strategy.parse(t).needs_var or pools[0].pred_var is not None)
        ),
    }
    return {"summary.json": json_bytes(summary), "canonical.csv": scores_csv(datasets)}


RECIPES: dict[str, Callable[[ExperimentConfig], Files]] = {
    "simulate-oracle": simulate_oracle,
    "simulate-correlation": simulate_correlation,
    "validate-unified-law": validate_unified_law,
    "diagnose": diagnose,
    "train-prm": train_prm,
    "failure-experiment": failure_experiment,
    "strategies": strategies,
    "ingest-check": ingest_check,
}
