"""A small two-head probabilistic reward model trained with NLL or MSE.

Architecture: ``h = tanh(W1 x + b1)``; ``mu = sigmoid(w_mu . h + b_mu)``;
``var = clamp(softplus(w_var . h + b_var), 1e-4, 0.5)``. The clamp is hard,
so its gradient is zero outside the range.

Training objective per minibatch of size B::

    L = (1/B) sum_i w(y_i) * l(mu_i, var_i, y_i) + lambda * sum_{i,j} max(0, m - (mu_i - mu_j))

where ``l`` is the Gaussian NLL or the squared error, ``w(y) = 0.3 + 0.7 y``
and the hinge runs over ordered pairs with ``y_i > y_j`` and ``y_i > tau``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import CandidatePool, UserDataset
from .diagnostics import compute_report
from .rng import cell_generator
from .synth import FeatureUserSpec, generate_feature_user

VAR_MIN = 1e-4
VAR_MAX = 0.5
PARAM_ORDER = ("W1", "b1", "w_mu", "b_mu", "w_var", "b_var")
FORMAT_VERSION = 1


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softplus(z):
    return np.logaddexp(0.0, z)


def inverse_softplus(v: float) -> float:
    return v + math.log(-math.expm1(-v))


# --- per-sample losses ---------------------------------------------------------


def nll_loss(mu, var, y):
    """Gaussian negative log-likelihood without the constant term."""
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0):
        raise ValueError("variance must be > 0")
    r = np.asarray(y, dtype=np.float64) - mu
    out = 0.5 * np.log(var) + r * r / (2.0 * var)
    return float(out) if out.ndim == 0 else out


def nll_grad(mu, var, y):
    """``(dL/dmu, dL/dvar)`` of :func:`nll_loss`."""
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0):
        raise ValueError("variance must be > 0")
    r = np.asarray(y, dtype=np.float64) - mu
    d_mu = -r / var
    d_var = 0.5 / var - r * r / (2.0 * var * var)
    if d_mu.ndim == 0:
        return float(d_mu), float(d_var)
    return d_mu, d_var


def mse_loss(mu, y):
    r = np.asarray(y, dtype=np.float64) - mu
    out = r * r
    return float(out) if out.ndim == 0 else out


def mse_grad(mu, y):
    out = -2.0 * (np.asarray(y, dtype=np.float64) - mu)
    return float(out) if out.ndim == 0 else out


def _pair_mask(ys: np.ndarray, tau: float) -> np.ndarray:
    return (ys[:, None] > ys[None, :]) & (ys[:, None] > tau)


def contrastive_loss(mus, ys, tau: float = 0.5, margin: float = 0.02) -> float:
    """Sum of ``max(0, margin - (mu_i - mu_j))`` over pairs ``y_i > y_j``, ``y_i > tau``."""
    mus = np.asarray(mus, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if mus.shape != ys.shape:
        raise ValueError(f"length mismatch: {mus.shape} vs {ys.shape}")
    hinge = margin - (mus[:, None] - mus[None, :])
    return float(np.sum(np.where(_pair_mask(ys, tau) & (hinge > 0), hinge, 0.0)))


def contrastive_grad(mus, ys, tau: float = 0.5, margin: float = 0.02) -> np.ndarray:
    mus = np.asarray(mus, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    active = _pair_mask(ys, tau) & (margin - (mus[:, None] - mus[None, :]) > 0)
    return active.sum(axis=0).astype(np.float64) - active.sum(axis=1)


def sample_weights(y) -> np.ndarray:
    return 0.3 + 0.7 * np.clip(np.asarray(y, dtype=np.float64), 0.0, 1.0)


# --- model ---------------------------------------------------------------------


@dataclass
class PrmModel:
    params: dict[str, np.ndarray]

    @classmethod
    def init(
        cls,
        dim: int = 16,
        hidden: int = 32,
        seed: int = 0,
        init_scale: float = 1.0,
        head_scale: float = 0.1,
        init_mu: float = 0.5,
        init_var: float = 0.05,
    ) -> "PrmModel":
        rng = cell_generator(seed, 0x5052)
        if not 0.0 < init_mu < 1.0 or not VAR_MIN < init_var < VAR_MAX:
            raise ValueError("initial mean/variance outside the head ranges")
        return cls(
            {
                "W1": rng.standard_normal((hidden, dim)) * (init_scale / math.sqrt(dim)),
                "b1": np.zeros(hidden),
                "w_mu": rng.standard_normal(hidden) * (head_scale / math.sqrt(hidden)),
                "b_mu": np.array(math.log(init_mu / (1.0 - init_mu))),
                "w_var": rng.standard_normal(hidden) * (head_scale / math.sqrt(hidden)),
                "b_var": np.array(inverse_softplus(init_var)),
            }
        )

    @classmethod
    def zeros(cls, dim: int, hidden: int) -> "PrmModel":
        return cls(
            {
                "W1": np.zeros((hidden, dim)),
                "b1": np.zeros(hidden),
                "w_mu": np.zeros(hidden),
                "b_mu": np.array(0.0),
                "w_var": np.zeros(hidden),
                "b_var": np.array(0.0),
            }
        )

    @property
    def dim(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def hidden(self) -> int:
        return self.params["W1"].shape[0]

    def copy(self) -> "PrmModel":
        return PrmModel({k: v.copy() for k, v in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_ORDER])

    def with_flat(self, theta: np.ndarray) -> "PrmModel":
        out, pos = {}, 0
        for k in PARAM_ORDER:
            shape = self.params[k].shape
            size = int(np.prod(shape))
            out[k] = np.array(theta[pos : pos + size]).reshape(shape)
            pos += size
        return PrmModel(out)

    def _forward(self, X: np.ndarray):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"feature dimension {X.shape[1]} does not match model ({self.dim})")
        p = self.params
        h = np.tanh(X @ p["W1"].T + p["b1"])
        mu = sigmoid(h @ p["w_mu"] + p["b_mu"])
        zv = h @ p["w_var"] + p["b_var"]
        sp = softplus(zv)
        var = np.clip(sp, VAR_MIN, VAR_MAX)
        return X, h, mu, zv, sp, var

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        _, _, mu, _, _, var = self._forward(X)
        return mu, var

    def to_json(self) -> str:
        """Versioned parameter file; floats are written as round-trip decimal strings."""
        doc = {
            "format": "bonlaw-prm",
            "version": FORMAT_VERSION,
            "dim": self.dim,
            "hidden": self.hidden,
            "param_order": list(PARAM_ORDER),
            "params": {
                k: {
                    "shape": list(self.params[k].shape),
                    "values": [repr(float(v)) for v in self.params[k].ravel()],
                }
                for k in PARAM_ORDER
            },
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PrmModel":
        doc = json.loads(text)
        if doc.get("format") != "bonlaw-prm" or doc.get("version") != FORMAT_VERSION:
            raise ValueError("not a bonlaw-prm v1 parameter file")
        params = {}
        for k in PARAM_ORDER:
            entry = doc["params"][k]
            vals = np.array([float(v) for v in entry["values"]], dtype=np.float64)
            params[k] = vals.reshape(entry["shape"])
        return cls(params)


def forward(model: PrmModel, features) -> tuple[float, float]:
    """``(mu, var)`` for a single feature vector."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward takes one feature vector; use PrmModel.predict for batches")
    mu, var = model.predict(x[None, :])
    return float(mu[0]), float(var[0])


# --- objective -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "nll"
    lam: float = 1.0
    tau: float = 0.5
    margin: float = 0.02
    sample_weight_range: tuple[float, float] = (0.3, 1.0)
    learning_rate: float = 0.05
    epochs: int = 100
    batch_size: int = 32
    patience: int = 5
    warmup_fraction: float = 0.0
    momentum: float = 0.0
    grad_clip: float | None = None  # global L2 norm cap per step
    val_fraction: float = 0.2
    hidden: int = 32
    init_scale: float = 1.0
    head_scale: float = 0.1
    init_var: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.loss_kind not in ("mse", "nll"):
            raise ValueError(f"loss_kind must be 'mse' or 'nll', got {self.loss_kind!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.margin > 0:
            raise ValueError("margin must be > 0")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if tuple(self.sample_weight_range) != (0.3, 1.0):
            raise ValueError("only the linear (0.3, 1.0) sample weighting is implemented")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("learning_rate, epochs, batch_size and patience must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("warmup_fraction and momentum must lie in [0, 1)")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be > 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class LossParts:
    total: float
    sample: float
    contrast: float


def total_loss(
    model: PrmModel,
    X,
    y,
    config: TrainConfig,
    with_grad: bool = True,
    frozen_var: float | None = None,
) -> tuple[LossParts, dict[str, np.ndarray] | None]:
    """Loss on one batch and, optionally, its gradient for every parameter.

    ``frozen_var`` replaces the variance head output by a constant (no
    gradient flows to the variance head); used to compare NLL with MSE.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty batch")
    X, h, mu, zv, sp, var = model._forward(X)
    if y.shape != mu.shape:
        raise ValueError("labels do not match the batch")
    if frozen_var is not None:
        var = np.full_like(mu, frozen_var)
    B = y.size
    w = sample_weights(y)
    if config.loss_kind == "mse":
        per = mse_loss(mu, y)
        d_mu = w * mse_grad(mu, y) / B
        d_var = np.zeros(B)
    else:
        per = nll_loss(mu, var, y)
        g_mu, g_var = nll_grad(mu, var, y)
        d_mu = w * g_mu / B
        d_var = w * g_var / B
    per = np.atleast_1d(per)
    sample = float(np.dot(w, per) / B)
    contrast = contrastive_loss(mu, y, config.tau, config.margin) if config.lam > 0 else 0.0
    parts = LossParts(sample + config.lam * contrast, sample, contrast)
    if not with_grad:
        return parts, None
    if config.lam > 0:
        d_mu = d_mu + config.lam * contrastive_grad(mu, y, config.tau, config.margin)

    p = model.params
    dz_mu = d_mu * mu * (1.0 - mu)
    if frozen_var is None:
        inside = (sp > VAR_MIN) & (sp < VAR_MAX)
        dz_v = d_var * sigmoid(zv) * inside
    else:
        dz_v = np.zeros(B)
    dh = np.outer(dz_mu, p["w_mu"]) + np.outer(dz_v, p["w_var"])
    dpre = dh * (1.0 - h * h)
    grads = {
        "W1": dpre.T @ X,
        "b1": dpre.sum(axis=0),
        "w_mu": h.T @ dz_mu,
        "b_mu": np.array(dz_mu.sum()),
        "w_var": h.T @ dz_v,
        "b_var": np.array(dz_v.sum()),
    }
    return parts, grads


def finite_difference_grad(loss_fn, theta: np.ndarray, epsilon: float = 1e-6) -> np.ndarray:
    """Central differences ``(L(t + e) - L(t - e)) / 2e`` of a scalar function."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + epsilon
        up = loss_fn(theta)
        theta[i] = old - epsilon
        down = loss_fn(theta)
        theta[i] = old
        grad[i] = (up - down) / (2.0 * epsilon)
    return grad


def model_finite_difference_grad(model: PrmModel, X, y, config: TrainConfig, epsilon: float = 1e-6) -> dict[str, np.ndarray]:
    """Finite-difference gradient of :func:`total_loss`, shaped like ``model.params``."""

    def f(theta):
        return total_loss(model.with_flat(theta), X, y, config, with_grad=False)[0].total

    flat = finite_difference_grad(f, model.flat(), epsilon)
    return model.with_flat(flat).params


def flatten_grads(grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([grads[k].ravel() for k in PARAM_ORDER])


# --- training ------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_sample_loss: float
    train_contrast_loss: float
    val_loss: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stop_epoch: int = -1
    stopped_early: bool = False

    @property
    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.epochs]


def dataset_arrays(pools: Sequence[CandidatePool]) -> tuple[np.ndarray, np.ndarray]:
    if not pools:
        raise ValueError("empty dataset")
    for p in pools:
        if p.features is None:
            raise ValueError(f"pool {p.user_id}/{p.query_id} has no features")
    dims = {p.features.shape[1] for p in pools}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dimensions {sorted(dims)}")
    X = np.concatenate([p.features for p in pools])
    y = np.concatenate([p.true_scores for p in pools])
    return X, y


def split_pools(pools: Sequence[CandidatePool], fraction: float, seed: int, tag: int):
    """Seeded (rest, held_out) split by query; both sides non-empty when possible."""
    n = len(pools)
    if n < 2:
        return list(pools), []
    k = min(n - 1, max(1, int(round(fraction * n))))
    order = cell_generator(seed, tag).permutation(n)
    held = set(int(i) for i in order[:k])
    return [p for i, p in enumerate(pools) if i not in held], [p for i, p in enumerate(pools) if i in held]


def validation_loss(model: PrmModel, X, y, config: TrainConfig) -> float:
    """Weighted per-sample term of the objective (no contrastive part)."""
    return total_loss(model, X, y, config, with_grad=False)[0].sample


def train_user_rm(
    dataset: UserDataset | Sequence[CandidatePool],
    config: TrainConfig,
) -> tuple[PrmModel, TrainHistory]:
    """Minibatch gradient descent with early stopping on validation loss.

    Validation queries are a seeded held-out subset of the user's pools. The
    returned model holds the parameters of the best validation epoch.
    """
    pools = list(dataset.pools if isinstance(dataset, UserDataset) else dataset)
    X_all, _ = dataset_arrays(pools)
    train_pools, val_pools = split_pools(pools, config.val_fraction, config.seed, 0x5641)
    X, y = dataset_arrays(train_pools)
    Xv, yv = dataset_arrays(val_pools) if val_pools else (X, y)

    model = PrmModel.init(
        dim=X_all.shape[1],
        hidden=config.hidden,
        seed=config.seed,
        init_scale=config.init_scale,
        head_scale=config.head_scale,
        init_mu=float(np.clip(y.mean(), 0.05, 0.95)),
        init_var=config.init_var,
    )
    rng = cell_generator(config.seed, 0x5348)
    n = y.size
    steps_per_epoch = math.ceil(n / config.batch_size)
    warmup = int(config.warmup_fraction * steps_per_epoch * config.epochs)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}

    history = TrainHistory()
    best = model.copy()
    best_val = math.inf
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        tot = samp = con = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            parts, grads = total_loss(model, X[idx], y[idx], config)
            tot += parts.total * idx.size
            samp += parts.sample * idx.size
            con += parts.contrast * idx.size
            lr = config.learning_rate * (min(1.0, (step + 1) / warmup) if warmup else 1.0)
            if config.grad_clip is not None:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > config.grad_clip:
                    grads = {k: g * (config.grad_clip / norm) for k, g in grads.items()}
            for k, g in grads.items():
                velocity[k] = config.momentum * velocity[k] + g
                model.params[k] = model.params[k] - lr * velocity[k]
            step += 1
        val = validation_loss(model, Xv, yv, config)
        history.epochs.append(EpochRecord(epoch, tot / n, samp / n, con / n, val))
        if val < best_val:
            best_val = val
            best = model.copy()
            history.best_epoch = epoch
        elif epoch - history.best_epoch >= config.patience:
            history.stopped_early = True
            break
    history.stop_epoch = len(history.epochs) - 1
    return best, history


def score_pools(model: PrmModel, pools: Sequence[CandidatePool]) -> list[CandidatePool]:
    """Copies of ``pools`` carrying the model's mean and variance predictions."""
    out = []
    for p in pools:
        if p.features is None:
            raise ValueError(f"pool {p.user_id}/{p.query_id} has no features")
        mu, var = model.predict(p.features)
        out.append(p.with_predictions(mu, var))
    return out


# --- collapse / hacking comparison -------------------------------------------


@dataclass(frozen=True)
class FailurePopulationConfig:
    """Mixed population: users with narrow, weakly predictable labels plus normal users."""

    n_low: int = 12
    n_normal: int = 12
    low: FeatureUserSpec = field(
        default_factory=lambda: FeatureUserSpec(
            n_queries=60, candidates_per_query=20, label_mean=0.3,
            label_std=0.02, signal=0.5, query_effect=0.0,
        )
    )
    normal: FeatureUserSpec = field(
        default_factory=lambda: FeatureUserSpec(
            n_queries=60, candidates_per_query=20, label_mean=0.4,
            label_std=0.10, signal=0.999, query_effect=0.0,
        )
    )
    eval_fraction: float = 0.3
    threshold: float = 0.1
    seed: int = 1

    def __post_init__(self) -> None:
        if self.n_low < 0 or self.n_normal < 0 or self.n_low + self.n_normal < 2:
            raise ValueError("need at least 2 users in total")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ValueError("eval_fraction must lie in (0, 1)")


def failure_train_config(loss_kind: str, **overrides) -> TrainConfig:
    """Training settings shared by both arms of the failure-mode comparison."""
    base = dict(
        learning_rate=0.02, momentum=0.9, grad_clip=1.0, epochs=50,
        head_scale=4.0, batch_size=32, patience=5,
    )
    base.update(overrides)
    return TrainConfig(loss_kind=loss_kind, **base)


@dataclass
class FailureModeResult:
    alpha_mse: float
    alpha_nll: float
    beta_mse: float
    beta_nll: float
    rho_u_mse: dict[str, float]
    rho_u_nll: dict[str, float]
    low_users: list[str]
    normal_users: list[str]
    mean_var_low_nll: float
    mean_var_normal_nll: float
    stop_epochs_mse: dict[str, int]
    stop_epochs_nll: dict[str, int]

    def table(self) -> list[dict]:
        return [
            {"loss": "mse", "alpha": self.alpha_mse, "beta": self.beta_mse},
            {"loss": "nll", "alpha": self.alpha_nll, "beta": self.beta_nll},
        ]

    def to_json_dict(self) -> dict:
        return asdict(self)


def failure_mode_experiment(
    population: FailurePopulationConfig,
    mse_config: TrainConfig,
    nll_config: TrainConfig,
    threads: int = 1,
) -> FailureModeResult:
    """Train matched MSE and NLL models per user; measure alpha and beta on held-out queries."""
    if mse_config.loss_kind != "mse" or nll_config.loss_kind != "nll":
        raise ValueError("expected an MSE config and an NLL config")
    n_total = population.n_low + population.n_normal
    users = []
    for i in range(n_total):
        spec = population.low if i < population.n_low else population.normal
        users.append(generate_feature_user(spec, i, population.seed))
    low_ids = [u.user_id for u in users[: population.n_low]]
    normal_ids = [u.user_id for u in users[population.n_low :]]

    splits = [split_pools(u.pools, population.eval_fraction, population.seed + i, 0x4556) for i, u in enumerate(users)]
    if any(not ev for _, ev in splits):
        raise ValueError("every user needs at least 2 queries")

    out = {}
    for cfg in (mse_config, nll_config):
        def fit(job, cfg=cfg):
            train, held = job
            model, hist = train_user_rm(train, cfg)
            return score_pools(model, held), hist.stop_epoch

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                results = list(ex.map(fit, splits))
        else:
            results = [fit(job) for job in splits]
        scored, stops, var_means = [], {}, {}
        for u, (pools, stop) in zip(users, results):
            scored.append(UserDataset(u.user_id, tuple(pools)))
            stops[u.user_id] = stop
            var_means[u.user_id] = float(np.mean(np.concatenate([p.pred_var for p in pools])))
        report = compute_report(scored, threshold=population.threshold)
        out[cfg.loss_kind] = (report, stops, var_means)

    rep_m, stops_m, _ = out["mse"]
    rep_n, stops_n, var_n = out["nll"]

    def group_mean(ids):
        return float(np.mean([var_n[i] for i in ids])) if ids else float("nan")

    return FailureModeResult(
        alpha_mse=rep_m.alpha,
        alpha_nll=rep_n.alpha,
        beta_mse=rep_m.beta,
        beta_nll=rep_n.beta,
        rho_u_mse={k: float(v) for k, v in rep_m.per_user_rho.items()},
        rho_u_nll={k: float(v) for k, v in rep_n.per_user_rho.items()},
        low_users=low_ids,
        normal_users=normal_ids,
        mean_var_low_nll=group_mean(low_ids),
        mean_var_normal_nll=group_mean(normal_ids),
        stop_epochs_mse=stops_m,
        stop_epochs_nll=stops_n,
    )
