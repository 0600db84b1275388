"""Seeded synthetic rewards, correlated (true, predicted) pairs and populations.

All randomness flows through :func:`bonlaw.rng.cell_generator`, keyed by the
population seed plus a (stream tag, user, query) path, so every cell is
generated independently of how the work is scheduled.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import CandidatePool, UserDataset
from .rng import cell_generator

# stream tags keep the different uses of one seed apart
_TAG_ASSIGN = 1
_TAG_CELL = 2
_TAG_HACK = 3
_TAG_FEATURE_USER = 4
_TAG_FEATURE_CELL = 5


@dataclass(frozen=True)
class RewardSpec:
    mean: float
    sigma: float
    clip_to_unit: bool = True

    def __post_init__(self) -> None:
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def sample_rewards(spec: RewardSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if spec.sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {spec.sigma}")
    if n < 1:
        raise ValueError("n must be >= 1")
    out = spec.mean + spec.sigma * rng.standard_normal(n)
    if spec.clip_to_unit:
        np.clip(out, 0.0, 1.0, out=out)
    return out


def sample_correlated_pair(
    spec: RewardSpec,
    pred_sigma: float,
    rho: float,
    n: int,
    rng: np.random.Generator,
    pred_mean: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Bivariate normal (true, predicted) draws with correlation ``rho``.

    Built from two independent standard normals via the 2x2 Cholesky factor:
    ``pred = rho * z1 + sqrt(1 - rho^2) * z2``. Only the true score is
    clipped when ``spec.clip_to_unit`` is set. Returns two arrays.
    """
    if abs(rho) > 1:
        raise ValueError(f"|rho| must be <= 1, got {rho}")
    if n < 2:
        raise ValueError("n must be >= 2")
    if spec.sigma < 0 or pred_sigma < 0:
        raise ValueError("standard deviations must be >= 0")
    z = rng.standard_normal((2, n))
    true = spec.mean + spec.sigma * z[0]
    if spec.clip_to_unit:
        np.clip(true, 0.0, 1.0, out=true)
    centre = spec.mean if pred_mean is None else pred_mean
    pred = centre + pred_sigma * (rho * z[0] + math.sqrt(1.0 - rho * rho) * z[1])
    return true, pred


@dataclass(frozen=True)
class PopulationSpec:
    n_users: int
    queries_per_user: int
    candidates_per_query: int
    base_reward: RewardSpec = field(default_factory=lambda: RewardSpec(0.3, 0.1))
    collapse_fraction: float = 0.0
    hacking_fraction: float = 0.0
    rho_plus: float = 0.5
    rho_minus: float = -0.25
    rho_collapsed: float = 0.0
    seed: int = 0
    pred_sigma: float | None = None  # defaults to base_reward.sigma
    collapsed_pred_scale: float = 0.01
    rho_spread: float = 0.0  # per-query jitter of rho around its flag value; off by default

    def __post_init__(self) -> None:
        for name in ("n_users", "queries_per_user", "candidates_per_query"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("collapse_fraction", "hacking_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.rho_plus <= 1.0:
            raise ValueError(f"rho_plus must lie in (0, 1], got {self.rho_plus}")
        if not -1.0 <= self.rho_minus < 0.0:
            raise ValueError(f"rho_minus must lie in [-1, 0), got {self.rho_minus}")
        if abs(self.rho_collapsed) > 1:
            raise ValueError("rho_collapsed must lie in [-1, 1]")
        if self.rho_spread < 0:
            raise ValueError("rho_spread must be >= 0")

    @property
    def effective_pred_sigma(self) -> float:
        return self.base_reward.sigma if self.pred_sigma is None else self.pred_sigma


@dataclass(frozen=True, eq=False)
class SyntheticPopulation:
    users: tuple[UserDataset, ...]
    collapsed: tuple[bool, ...]
    hacked: tuple[tuple[bool, ...], ...]  # per user, per query
    spec: PopulationSpec | None = None

    def same_as(self, other: "SyntheticPopulation") -> bool:
        return (
            self.collapsed == other.collapsed
            and self.hacked == other.hacked
            and len(self.users) == len(other.users)
            and all(a.same_as(b) for a, b in zip(self.users, other.users))
        )


def _assign_flags(spec: PopulationSpec) -> tuple[list[bool], list[list[bool]]]:
    rng = cell_generator(spec.seed, _TAG_ASSIGN)
    n_collapsed = int(math.floor(spec.collapse_fraction * spec.n_users + 1e-9))
    order = rng.permutation(spec.n_users)
    collapsed = [False] * spec.n_users
    for u in order[:n_collapsed]:
        collapsed[int(u)] = True

    n_hacked = int(math.floor(spec.hacking_fraction * spec.queries_per_user + 1e-9))
    hacked = []
    for u in range(spec.n_users):
        flags = [False] * spec.queries_per_user
        if not collapsed[u]:
            qrng = cell_generator(spec.seed, _TAG_HACK, u)
            for q in qrng.permutation(spec.queries_per_user)[:n_hacked]:
                flags[int(q)] = True
        hacked.append(flags)
    return collapsed, hacked


def _make_user(spec: PopulationSpec, u: int, collapsed: bool, hacked: list[bool]) -> UserDataset:
    user_id = f"u{u:04d}"
    pools = []
    pred_sigma = spec.effective_pred_sigma
    for q in range(spec.queries_per_user):
        rng = cell_generator(spec.seed, _TAG_CELL, u, q)
        if collapsed:
            rho, sd = spec.rho_collapsed, spec.collapsed_pred_scale * pred_sigma
        else:
            rho, sd = (spec.rho_minus if hacked[q] else spec.rho_plus), pred_sigma
        if spec.rho_spread > 0:
            rho = float(np.clip(rho + spec.rho_spread * rng.standard_normal(), -1.0, 1.0))
        true, pred = sample_correlated_pair(
            spec.base_reward, sd, rho, spec.candidates_per_query, rng
        ) if spec.candidates_per_query >= 2 else _single(spec.base_reward, rng)
        pools.append(CandidatePool(user_id, f"q{q:04d}", true, pred))
    return UserDataset(user_id, tuple(pools))


def _single(reward: RewardSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    true = sample_rewards(reward, 1, rng)
    return true, true.copy()


def generate_population(spec: PopulationSpec, threads: int = 1) -> SyntheticPopulation:
    """Mixture population: collapsed users, then hacked queries among the rest.

    The first ``floor(alpha * n_users)`` users of a seeded permutation are
    collapsed (predictions correlated at ``rho_collapsed`` with a tiny spread);
    within every other user ``floor(beta * queries)`` seeded queries are
    hacked (``rho_minus``) and the rest use ``rho_plus``.
    """
    collapsed, hacked = _assign_flags(spec)

    def build(u: int) -> UserDataset:
        return _make_user(spec, u, collapsed[u], hacked[u])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            users = list(pool.map(build, range(spec.n_users)))
    else:
        users = [build(u) for u in range(spec.n_users)]
    return SyntheticPopulation(
        tuple(users), tuple(collapsed), tuple(tuple(h) for h in hacked), spec
    )


def bivariate_population(
    n_users: int,
    queries_per_user: int,
    candidates_per_query: int,
    reward: RewardSpec,
    rho: float,
    seed: int,
    pred_sigma: float | None = None,
) -> list[UserDataset]:
    """Every query drawn at one correlation ``rho`` (any sign, including 0)."""
    if min(n_users, queries_per_user) < 1 or candidates_per_query < 2:
        raise ValueError("population dimensions too small")
    sd = reward.sigma if pred_sigma is None else pred_sigma
    users = []
    for u in range(n_users):
        user_id = f"u{u:04d}"
        pools = []
        for q in range(queries_per_user):
            rng = cell_generator(seed, _TAG_CELL, u, q)
            true, pred = sample_correlated_pair(reward, sd, rho, candidates_per_query, rng)
            pools.append(CandidatePool(user_id, f"q{q:04d}", true, pred))
        users.append(UserDataset(user_id, tuple(pools)))
    return users


# --- feature-level users for reward-model training ---------------------------


@dataclass(frozen=True)
class FeatureUserSpec:
    """A user whose labels are a noisy function of candidate features.

    ``signal`` is the share of label variance explained by the features;
    ``label_std`` is the target spread of the labels around ``label_mean``.
    """

    n_queries: int = 40
    candidates_per_query: int = 10
    dim: int = 16
    label_mean: float = 0.4
    label_std: float = 0.15
    signal: float = 0.9
    query_effect: float = 0.5  # share of feature variance shared within a query

    def __post_init__(self) -> None:
        if self.n_queries < 2 or self.candidates_per_query < 2 or self.dim < 1:
            raise ValueError("feature user dimensions too small")
        if not 0.0 <= self.signal <= 1.0:
            raise ValueError("signal must lie in [0, 1]")
        if not 0.0 <= self.query_effect < 1.0:
            raise ValueError("query_effect must lie in [0, 1)")
        if self.label_std < 0:
            raise ValueError("label_std must be >= 0")


def generate_feature_user(spec: FeatureUserSpec, user_index: int, seed: int) -> UserDataset:
    """One user with feature vectors; labels ``mean + std * (sqrt(s) f + sqrt(1-s) e)``."""
    user_id = f"u{user_index:04d}"
    urng = cell_generator(seed, _TAG_FEATURE_USER, user_index)
    w = urng.standard_normal(spec.dim)
    w /= np.linalg.norm(w)
    pools = []
    a = math.sqrt(spec.query_effect)
    b = math.sqrt(1.0 - spec.query_effect)
    for q in range(spec.n_queries):
        rng = cell_generator(seed, _TAG_FEATURE_CELL, user_index, q)
        shared = rng.standard_normal(spec.dim)
        x = a * shared[None, :] + b * rng.standard_normal((spec.candidates_per_query, spec.dim))
        latent = x @ w
        noise = rng.standard_normal(spec.candidates_per_query)
        y = spec.label_mean + spec.label_std * (
            math.sqrt(spec.signal) * latent + math.sqrt(1.0 - spec.signal) * noise
        )
        pools.append(
            CandidatePool(user_id, f"q{q:04d}", np.clip(y, 0.0, 1.0), features=x)
        )
    return UserDataset(user_id, tuple(pools))
