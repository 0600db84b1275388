"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are repeated
in the terminal summary under "acceptance criteria".
"""

import time

import numpy as np
import pytest

from bonlaw.core import CandidatePool, UserDataset
from bonlaw.diagnostics import compute_report, fit_subgaussian_sigma, linearity_check
from bonlaw.harness.cli import main as cli_main
from bonlaw.prm import (
    FailurePopulationConfig,
    PrmModel,
    TrainConfig,
    failure_mode_experiment,
    failure_train_config,
    flatten_grads,
    model_finite_difference_grad,
    mse_grad,
    nll_grad,
    total_loss,
)
from bonlaw.rng import cell_generator
from bonlaw.scaling import (
    ScalingLawParams,
    effective_correlation,
    fit_sqrt_log,
    predict_unified,
    score_prediction,
)
from bonlaw.selection import (
    CurveRequest,
    PackedPools,
    Strategy,
    estimate_utility_curve,
    select_best,
)
from bonlaw.synth import (
    PopulationSpec,
    RewardSpec,
    bivariate_population,
    generate_population,
    sample_correlated_pair,
)

GRID = (1, 5, 10, 15, 20, 30)


@pytest.fixture(scope="module")
def unified_population():
    spec = PopulationSpec(
        n_users=200, queries_per_user=50, candidates_per_query=30,
        base_reward=RewardSpec(0.3, 0.1), collapse_fraction=0.2, hacking_fraction=0.3,
        rho_plus=0.5, rho_minus=-0.25, seed=0,
    )
    return generate_population(spec)


def test_criterion_1_oracle_law(acceptance):
    t0 = time.perf_counter()
    spec = PopulationSpec(200, 50, 30, base_reward=RewardSpec(0.3, 0.1), seed=0)
    pop = generate_population(spec, threads=1)
    curve = estimate_utility_curve(pop.users, Strategy("oracle"), CurveRequest(GRID, 20, 0), threads=1)
    elapsed = time.perf_counter() - t0
    a, b = fit_sqrt_log(curve)
    fit = predict_unified(ScalingLawParams(a, b), GRID)
    _, r2 = score_prediction(fit, curve)
    ok = r2 >= 0.98 and abs(a - 0.3) <= 0.01 and 0.07 <= b <= 0.1415 and elapsed <= 30.0
    acceptance(1, "oracle sqrt(ln N) law", ok, f"R2={r2:.4f} a={a:.4f} b={b:.4f} time={elapsed:.1f}s")


def test_criterion_2_correlation_trichotomy(acceptance):
    reward = RewardSpec(0.3, 0.1)
    req = CurveRequest(GRID, 20, 0)
    slopes, b_oracle = {}, None
    for rho in (-0.5, 0.0, 0.5, 0.9):
        packed = PackedPools.pack(bivariate_population(100, 40, 30, reward, rho, seed=0))
        if b_oracle is None:
            b_oracle = fit_sqrt_log(estimate_utility_curve(packed, Strategy("oracle"), req))[1]
        slopes[rho] = fit_sqrt_log(estimate_utility_curve(packed, Strategy("mean"), req))[1]
    ok = all(abs(slopes[r] - r * b_oracle) <= 0.15 * b_oracle for r in (-0.5, 0.5, 0.9))
    ok &= abs(slopes[0.0]) <= 0.10 * b_oracle
    ok &= slopes[-0.5] < 0  # fitted form strictly decreasing
    ratios = " ".join(f"{r:+.1f}:{slopes[r] / b_oracle:+.3f}" for r in slopes)
    acceptance(2, "correlation trichotomy", ok, f"b_oracle={b_oracle:.4f} b/b_oracle {ratios}")


def test_criterion_3_unified_round_trip(acceptance, unified_population):
    users = unified_population.users
    rep = compute_report(users)
    errs = {
        "alpha": abs(rep.alpha - 0.2),
        "beta": abs(rep.beta - 0.3),
        "rho+": abs(rep.rho_plus_mean - 0.5),
        "rho-": abs(rep.rho_minus_mean + 0.25),
    }
    packed = PackedPools.pack(users)
    req = CurveRequest(GRID, 20, 0)
    oracle = estimate_utility_curve(packed, Strategy("oracle"), req)
    observed = estimate_utility_curve(packed, Strategy("mean"), req)
    mu_bar = float(np.concatenate([u.all_true() for u in users]).mean())
    params = ScalingLawParams(
        mu_bar, fit_sqrt_log(oracle)[1], rep.alpha, rep.beta, rep.rho_plus_mean, rep.rho_minus_mean
    )
    rmae, r2 = score_prediction(predict_unified(params, GRID), observed)
    ok = all(e <= 0.05 for e in errs.values()) and rmae <= 0.05 and r2 >= 0.9
    detail = " ".join(f"|d{k}|={v:.3f}" for k, v in errs.items()) + f" relMAE={rmae:.4f} R2={r2:.4f}"
    acceptance(3, "unified-law round trip", ok, detail)


# (task, RM, alpha, beta, rho+, rho-, tabulated rho_eff)
RHO_EFF_ROWS = [
    ("LaMP-4", "Global", 0.33, 0.45, 0.222, -0.214, 0.017),
    ("LaMP-4", "Det", 0.20, 0.33, 0.273, -0.202, 0.093),
    ("LaMP-4", "Prob", 0.00, 0.08, 0.523, -0.168, 0.467),
    ("LaMP-5", "Global", 0.17, 0.46, 0.300, -0.261, 0.035),
    ("LaMP-5", "Det", 0.07, 0.37, 0.312, -0.266, 0.090),
    ("LaMP-5", "Prob", 0.00, 0.22, 0.458, -0.242, 0.307),
    ("Abstract", "Global", 0.00, 0.37, 0.323, -0.254, 0.110),
    ("Abstract", "Det", 0.00, 0.17, 0.496, -0.295, 0.363),
    ("Abstract", "Prob", 0.00, 0.01, 0.758, -0.187, 0.754),
    ("Topic", "Global", 0.05, 0.24, 0.634, -0.358, 0.380),
    ("Topic", "Det", 0.25, 0.20, 0.453, -0.304, 0.224),
    ("Topic", "Prob", 0.00, 0.01, 0.787, -0.223, 0.772),
    ("Product", "Global", 0.00, 0.04, 0.486, -0.122, 0.462),
    ("Product", "Det", 0.25, 0.19, 0.324, -0.254, 0.162),
    ("Product", "Prob", 0.00, 0.00, 0.757, -0.213, 0.757),
]


def test_criterion_4_table_rho_eff(acceptance):
    t0 = time.perf_counter()
    misses = []
    for task, rm, a, b, rp, rm_, tab in RHO_EFF_ROWS:
        got = effective_correlation(a, b, rp, rm_)
        if abs(got - tab) > 0.005:
            misses.append(f"{task}/{rm}: {got:.4f} vs {tab:.3f}")
    elapsed_ms = (time.perf_counter() - t0) * 1e3
    ok = not misses and elapsed_ms < 1.0
    detail = f"{len(RHO_EFF_ROWS) - len(misses)}/15 rows within 0.005 in {elapsed_ms:.3f} ms"
    if misses:
        detail += "; off: " + ", ".join(misses)
    acceptance(4, "tabulated rho_eff reproduction", ok, detail)


def test_criterion_5_nll_calculus(acceptance):
    rng = cell_generator(5, 1)
    # stationary point of the variance gradient
    mu = rng.uniform(0.05, 0.95, 1000)
    y = rng.uniform(0.0, 1.0, 1000)
    var = (y - mu) ** 2
    _, d_var = nll_grad(mu, var, y)
    # relative to the size of either term of d_var
    stationary = float(np.max(np.abs(d_var) * var / 0.5))
    # gradient buffering
    mu = rng.uniform(0.05, 0.95, 1000)
    y = rng.uniform(0.0, 1.0, 1000)
    var = rng.uniform(1e-4, 0.5, 1000)
    d_mu, _ = nll_grad(mu, var, y)
    buffering = float(np.max(np.abs(d_mu - mse_grad(mu, y) / (2.0 * var))))
    # full model against central differences
    worst = 0.0
    for k in range(100):
        prng = cell_generator(5, 2, k)
        cfg = TrainConfig(loss_kind="nll", hidden=6, head_scale=1.0, seed=k)
        model = PrmModel.init(dim=4, hidden=6, seed=k, head_scale=1.0, init_mu=0.4, init_var=0.05)
        X = prng.standard_normal((12, 4))
        yb = prng.uniform(0.0, 1.0, 12)
        _, grads = total_loss(model, X, yb, cfg)
        g = flatten_grads(grads)
        g_fd = flatten_grads(model_finite_difference_grad(model, X, yb, cfg, epsilon=1e-6))
        worst = max(worst, float(np.linalg.norm(g - g_fd) / max(np.linalg.norm(g), np.linalg.norm(g_fd), 1e-12)))
    ok = stationary <= 1e-12 and buffering <= 1e-10 and worst <= 1e-4
    acceptance(
        5, "NLL calculus", ok,
        f"stationary={stationary:.2e} buffering={buffering:.2e} fd_rel_err={worst:.2e}",
    )


def test_criterion_6_failure_direction(acceptance):
    t0 = time.perf_counter()
    pop = FailurePopulationConfig(seed=0)
    res = failure_mode_experiment(pop, failure_train_config("mse"), failure_train_config("nll"))
    elapsed = time.perf_counter() - t0
    ok = (
        pop.n_low >= 10 and pop.n_normal >= 10 and pop.low.label_std <= 0.02
        and res.alpha_nll < res.alpha_mse
        and res.beta_nll <= res.beta_mse
        and res.mean_var_low_nll > res.mean_var_normal_nll
        and elapsed <= 300.0
    )
    acceptance(
        6, "failure-mode direction", ok,
        f"alpha mse={res.alpha_mse:.3f} nll={res.alpha_nll:.3f}; beta mse={res.beta_mse:.3f} "
        f"nll={res.beta_nll:.3f}; var low={res.mean_var_low_nll:.2e} normal={res.mean_var_normal_nll:.2e}; "
        f"time={elapsed:.1f}s",
    )


def _random_pool(rng, k: int, user_id: str = "u", query_id: str = "q") -> CandidatePool:
    true = rng.uniform(0.0, 1.0, k)
    mean = rng.uniform(0.0, 1.0, k)
    var = rng.uniform(0.0, 0.2, k)
    # sprinkle exact ties
    if k > 3:
        mean[1] = mean[0]
        var[2] = var[0]
    return CandidatePool(user_id, query_id, true, mean, var)


def test_criterion_7_strategy_algebra(acceptance):
    rng = cell_generator(7, 1)
    mismatches = 0
    bad_index = 0
    for _ in range(1000):
        pool = _random_pool(rng, int(rng.integers(1, 25)))
        m = select_best(pool, Strategy("mean"))
        mismatches += select_best(pool, Strategy("lcb", 0.0)) != m
        mismatches += select_best(pool, Strategy("ucb", 0.0)) != m
        for p in (0.0, 0.2, 0.5, 0.99):
            i = select_best(pool, Strategy("varfilter", p))
            bad_index += not 0 <= i < len(pool)

    dominated = 0
    others = [Strategy.parse(s) for s in ("random", "mean", "lcb:0.5", "ucb:0.5", "varfilter:0.2", "snr")]
    for k in range(100):
        prng = cell_generator(7, 2, k)
        users = [
            UserDataset(f"u{u}", tuple(_random_pool(prng, 10, f"u{u}", f"q{q}") for q in range(4)))
            for u in range(5)
        ]
        packed = PackedPools.pack(users)
        req = CurveRequest((1, 3, 6, 10), 5, k)
        oracle = estimate_utility_curve(packed, Strategy("oracle"), req).utilities
        for s in others:
            u = estimate_utility_curve(packed, s, req).utilities
            dominated += int(np.any(u > oracle))
    ok = mismatches == 0 and dominated == 0 and bad_index == 0
    acceptance(
        7, "strategy algebra", ok,
        f"LCB0/UCB0 vs Mean mismatches={mismatches}; oracle violations={dominated}; invalid VarFilter={bad_index}",
    )


def test_criterion_8_assumption_checks(acceptance):
    rng = cell_generator(8, 1)
    sigma = fit_subgaussian_sigma(rng.standard_normal(100_000))
    const = fit_subgaussian_sigma(np.full(1000, 0.37))
    true, pred = sample_correlated_pair(RewardSpec(0.0, 1.0, clip_to_unit=False), 1.0, 0.6, 100_000, rng)
    slope = linearity_check(np.column_stack([pred, true]), bins=10).linearity_slope
    ok = 0.95 <= sigma <= 1.15 and const == 0.0 and 0.54 <= slope <= 0.66
    acceptance(8, "assumption checks", ok, f"sigma_hat={sigma:.4f} const={const} slope={slope:.4f}")


def test_criterion_9_determinism(acceptance, tmp_path):
    outs = []
    for run, threads in enumerate((1, 8, 1, 8)):
        out = tmp_path / f"run{run}"
        code = cli_main(["validate-unified-law", "--seed", "11", "--threads", str(threads), "--out", str(out)])
        assert code == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir() if p.suffix in (".csv", ".json") and p.name != "manifest.json")
    differing = [
        (n, i) for n in names for i in range(1, 4) if (outs[0] / n).read_bytes() != (outs[i] / n).read_bytes()
    ]
    ok = bool(names) and not differing
    acceptance(9, "byte-identical outputs at 1 and 8 threads", ok, f"{len(names)} files compared over 4 runs; differing={differing}")
