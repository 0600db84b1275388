import math

import numpy as np
import pytest

from bonlaw.core import UserDataset
from bonlaw.diagnostics import variance_error_correlation
from bonlaw.prm import (
    VAR_MAX,
    VAR_MIN,
    FailurePopulationConfig,
    PrmModel,
    TrainConfig,
    contrastive_grad,
    contrastive_loss,
    failure_mode_experiment,
    failure_train_config,
    finite_difference_grad,
    flatten_grads,
    forward,
    model_finite_difference_grad,
    mse_loss,
    nll_grad,
    nll_loss,
    score_pools,
    split_pools,
    total_loss,
    train_user_rm,
)
from bonlaw.rng import cell_generator
from bonlaw.synth import FeatureUserSpec, generate_feature_user


def test_zero_model_outputs_half():
    m = PrmModel.zeros(4, 3)
    mu, var = forward(m, np.ones(4))
    assert mu == 0.5
    assert var == pytest.approx(VAR_MAX)  # softplus(0) = ln 2 is clamped to the upper bound


def test_variance_clamped_everywhere():
    m = PrmModel.init(dim=5, hidden=8, seed=1, head_scale=50.0)
    X = 10 * cell_generator(1).standard_normal((500, 5))
    mu, var = m.predict(X)
    assert var.min() >= VAR_MIN and var.max() <= VAR_MAX
    assert np.all((mu >= 0) & (mu <= 1))


def test_forward_reproducible_and_checked():
    m = PrmModel.init(dim=3, hidden=4, seed=2)
    x = np.array([0.1, -0.2, 0.3])
    assert forward(m, x) == forward(PrmModel.init(dim=3, hidden=4, seed=2), x)
    with pytest.raises(ValueError):
        forward(m, np.ones(4))


def test_json_round_trip_exact():
    m = PrmModel.init(dim=3, hidden=4, seed=3)
    back = PrmModel.from_json(m.to_json())
    np.testing.assert_array_equal(back.flat(), m.flat())
    with pytest.raises(ValueError):
        PrmModel.from_json('{"format": "other"}')


def test_nll_values():
    assert nll_loss(0.3, 1.0, 0.3) == 0.0
    assert nll_loss(0.5, 0.04, 0.7) == pytest.approx(0.5 * math.log(0.04) + 0.04 / 0.08, abs=1e-12)
    assert nll_loss(0.5, 0.04, 0.7) == pytest.approx(-1.10944, abs=1e-5)
    assert nll_loss(0.4, 0.25, 0.4) == pytest.approx(-0.69315, abs=1e-5)
    with pytest.raises(ValueError):
        nll_loss(0.4, 0.0, 0.4)


def test_nll_grad_values():
    d_mu, d_var = nll_grad(0.5, 0.04, 0.7)
    assert d_mu == pytest.approx(-5.0)
    _, d_var = nll_grad(0.5, 0.2**2, 0.7)
    assert abs(d_var) < 1e-12
    d_mu, _ = nll_grad(0.4, 0.1, 0.4)
    assert d_mu == 0.0


def test_nll_grad_matches_fd():
    rng = cell_generator(4)
    for _ in range(50):
        mu, y = rng.uniform(0.1, 0.9, 2)
        var = rng.uniform(0.01, 0.4)
        d_mu, d_var = nll_grad(mu, var, y)
        fd = finite_difference_grad(lambda t: nll_loss(t[0], t[1], y), np.array([mu, var]), 1e-6)
        np.testing.assert_allclose([d_mu, d_var], fd, rtol=1e-6, atol=1e-8)


def test_contrastive_cases():
    assert contrastive_loss([0.6, 0.5], [0.4, 0.3]) == 0.0  # no y above tau
    assert contrastive_loss([0.60, 0.55], [0.8, 0.6]) == 0.0
    assert contrastive_loss([0.60, 0.595], [0.8, 0.6]) == pytest.approx(0.015)
    mus = np.array([0.60, 0.595, 0.2])
    ys = np.array([0.8, 0.6, 0.1])
    fd = finite_difference_grad(lambda m: contrastive_loss(m, ys), mus, 1e-7)
    np.testing.assert_allclose(contrastive_grad(mus, ys), fd, atol=1e-6)


def _batch(seed, n=10, d=4):
    rng = cell_generator(seed, 9)
    return rng.standard_normal((n, d)), rng.uniform(0, 1, n)


def test_lambda_zero_mse_is_weighted_mse():
    m = PrmModel.init(dim=4, hidden=5, seed=5)
    X, y = _batch(5)
    parts, _ = total_loss(m, X, y, TrainConfig(loss_kind="mse", lam=0.0))
    mu, _ = m.predict(X)
    w = 0.3 + 0.7 * y
    assert parts.total == pytest.approx(float(np.mean(w * mse_loss(mu, y))), abs=1e-15)
    assert parts.contrast == 0.0


def test_frozen_variance_gradient_ratio():
    m = PrmModel.init(dim=4, hidden=5, seed=6)
    X, y = _batch(6)
    s = 0.07
    _, g_nll = total_loss(m, X, y, TrainConfig(loss_kind="nll", lam=0.0), frozen_var=s)
    _, g_mse = total_loss(m, X, y, TrainConfig(loss_kind="mse", lam=0.0))
    for k in ("W1", "b1", "w_mu", "b_mu"):
        np.testing.assert_allclose(g_nll[k], g_mse[k] / (2 * s), rtol=1e-12, atol=1e-15)
    assert np.all(g_nll["w_var"] == 0)


@pytest.mark.parametrize("kind", ["mse", "nll"])
def test_full_gradient_matches_fd(kind):
    cfg = TrainConfig(loss_kind=kind, lam=1.0)
    for seed in range(10):
        m = PrmModel.init(dim=4, hidden=6, seed=seed, head_scale=1.0)
        X, y = _batch(seed, n=16)
        _, g = total_loss(m, X, y, cfg)
        fd = flatten_grads(model_finite_difference_grad(m, X, y, cfg))
        a = flatten_grads(g)
        assert np.linalg.norm(a - fd) / np.linalg.norm(a) <= 1e-4


def test_fd_quadratic_and_epsilon_sweep():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    f = lambda t: 0.5 * t @ A @ t
    t0 = np.array([0.3, -0.7])
    np.testing.assert_allclose(finite_difference_grad(f, t0, 1e-4), A @ t0, atol=1e-10)
    # truncation error shrinks with epsilon, round-off grows again
    g_exact = np.array([math.exp(1.0)])
    errs = [
        abs(finite_difference_grad(lambda t: math.exp(t[0]), np.array([1.0]), e)[0] - g_exact[0])
        for e in (1e-2, 1e-3, 1e-4, 1e-5, 1e-7, 1e-9, 1e-11)
    ]
    best = int(np.argmin(errs))
    assert 0 < best < len(errs) - 1
    assert errs[0] > errs[best] and errs[-1] > errs[best]


def test_fd_zero_gradient_point():
    # mu = y everywhere and variance at its equilibrium: every per-sample gradient is ~0
    m = PrmModel.zeros(3, 2)
    m.params["b_var"] = np.array(math.log(math.expm1(0.01)))
    X = np.zeros((5, 3))
    y = np.full(5, 0.5)
    cfg = TrainConfig(loss_kind="mse", lam=0.0)
    assert np.max(np.abs(flatten_grads(model_finite_difference_grad(m, X, y, cfg)))) <= 1e-6


def _user(seed=1, **kw):
    spec = FeatureUserSpec(n_queries=30, candidates_per_query=10, **kw)
    return generate_feature_user(spec, 0, seed)


def test_training_loss_decreases():
    ds = _user(signal=1.0, label_std=0.15)
    cfg = TrainConfig(loss_kind="nll", epochs=5, learning_rate=0.02, momentum=0.9, grad_clip=1.0, patience=5)
    _, hist = train_user_rm(ds, cfg)
    losses = hist.train_losses
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_patience_and_determinism():
    ds = _user(signal=0.2, label_std=0.1)
    cfg = TrainConfig(loss_kind="nll", epochs=200, patience=5, learning_rate=0.05, momentum=0.9, grad_clip=1.0)
    m1, h1 = train_user_rm(ds, cfg)
    assert h1.stopped_early and h1.stop_epoch == h1.best_epoch + 5
    vals = h1.val_losses
    assert vals[h1.best_epoch] == min(vals)
    assert all(v >= vals[h1.best_epoch] for v in vals[h1.best_epoch + 1 :])
    m2, h2 = train_user_rm(ds, cfg)
    np.testing.assert_array_equal(m1.flat(), m2.flat())


def test_training_errors():
    with pytest.raises(ValueError):
        train_user_rm([], TrainConfig())
    ds = _user()
    pools = list(ds.pools)
    bad = pools[0].__class__(pools[0].user_id, "x", [0.1, 0.2], features=np.zeros((2, 3)))
    with pytest.raises(ValueError, match="dimension"):
        train_user_rm(pools + [bad], TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(loss_kind="hinge")
    with pytest.raises(ValueError):
        TrainConfig(sample_weight_range=(0.0, 1.0))


def test_learned_variance_tracks_error():
    ds = generate_feature_user(FeatureUserSpec(n_queries=60, candidates_per_query=10, signal=0.6), 0, 3)
    train, held = split_pools(ds.pools, 0.3, 3, 1)
    cfg = TrainConfig(loss_kind="nll", epochs=60, learning_rate=0.02, momentum=0.9, grad_clip=1.0)
    model, _ = train_user_rm(train, cfg)
    scored = UserDataset(ds.user_id, tuple(score_pools(model, held)))
    assert float(variance_error_correlation(scored)) > 0


def test_no_low_variance_users_no_collapse():
    pop = FailurePopulationConfig(n_low=0, n_normal=6, seed=2)
    res = failure_mode_experiment(pop, failure_train_config("mse"), failure_train_config("nll"), threads=2)
    assert res.alpha_mse <= 1 / 6 and res.alpha_nll == 0.0
    assert math.isnan(res.mean_var_low_nll)
