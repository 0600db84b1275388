"""Domain types and the statistics primitives shared by every other module."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence

import numpy as np


class Correlation(float):
    """A correlation value that remembers whether it was degenerate.

    A degenerate correlation (one input had zero variance) compares equal to
    0.0 so downstream counting treats it as "no signal", while ``degenerate``
    keeps the tag for reporting.
    """

    degenerate: bool

    def __new__(cls, value: float, degenerate: bool = False) -> "Correlation":
        obj = super().__new__(cls, value)
        obj.degenerate = degenerate
        return obj

    def __repr__(self) -> str:
        if self.degenerate:
            return "DEGENERATE"
        return f"Correlation({float(self)!r})"

    def __reduce__(self):
        return (Correlation, (float(self), self.degenerate))


DEGENERATE = Correlation(0.0, degenerate=True)


class ScoredCandidate(NamedTuple):
    true_score: float
    pred_mean: Optional[float] = None
    pred_var: Optional[float] = None


def _frozen(arr: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if arr is None:
        return None
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CandidatePool:
    """Scored candidates for one (user, query), stored column-wise.

    ``features`` is an optional (n_candidates, d) matrix used by the reward
    model trainer. Arrays are copied and made read-only on construction.
    """

    user_id: str
    query_id: str
    true_scores: np.ndarray
    pred_mean: Optional[np.ndarray] = None
    pred_var: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        true = _frozen(self.true_scores)
        if true.ndim != 1 or true.size == 0:
            raise ValueError(f"pool {self.user_id}/{self.query_id}: needs at least one candidate")
        if not np.all(np.isfinite(true)) or true.min() < 0.0 or true.max() > 1.0:
            raise ValueError(f"pool {self.user_id}/{self.query_id}: true scores must lie in [0, 1]")
        object.__setattr__(self, "true_scores", true)
        n = true.size
        for name in ("pred_mean", "pred_var"):
            arr = _frozen(getattr(self, name))
            if arr is not None and arr.shape != (n,):
                raise ValueError(f"pool {self.user_id}/{self.query_id}: {name} length mismatch")
            object.__setattr__(self, name, arr)
        if self.pred_var is not None and np.any(self.pred_var < 0):
            raise ValueError(f"pool {self.user_id}/{self.query_id}: pred_var must be >= 0")
        feats = _frozen(self.features)
        if feats is not None and (feats.ndim != 2 or feats.shape[0] != n):
            raise ValueError(f"pool {self.user_id}/{self.query_id}: features must be (n_candidates, d)")
        object.__setattr__(self, "features", feats)

    @classmethod
    def from_candidates(
        cls, user_id: str, query_id: str, candidates: Sequence[ScoredCandidate]
    ) -> "CandidatePool":
        true = [c.true_score for c in candidates]
        means = [c.pred_mean for c in candidates]
        variances = [c.pred_var for c in candidates]
        pred_mean = None if any(m is None for m in means) else means
        pred_var = None if any(v is None for v in variances) else variances
        return cls(user_id, query_id, true, pred_mean, pred_var)

    def __len__(self) -> int:
        return self.true_scores.size

    @property
    def candidates(self) -> list[ScoredCandidate]:
        out = []
        for i in range(len(self)):
            out.append(
                ScoredCandidate(
                    float(self.true_scores[i]),
                    None if self.pred_mean is None else float(self.pred_mean[i]),
                    None if self.pred_var is None else float(self.pred_var[i]),
                )
            )
        return out

    @property
    def has_predictions(self) -> bool:
        return self.pred_mean is not None

    def with_predictions(self, pred_mean, pred_var=None) -> "CandidatePool":
        return CandidatePool(
            self.user_id, self.query_id, self.true_scores, pred_mean, pred_var, self.features
        )

    def same_as(self, other: "CandidatePool") -> bool:
        """Structural equality (ids plus bit-identical arrays)."""

        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            self.user_id == other.user_id
            and self.query_id == other.query_id
            and eq(self.true_scores, other.true_scores)
            and eq(self.pred_mean, other.pred_mean)
            and eq(self.pred_var, other.pred_var)
            and eq(self.features, other.features)
        )


@dataclass(frozen=True, eq=False)
class UserDataset:
    user_id: str
    pools: tuple[CandidatePool, ...]

    def __post_init__(self) -> None:
        pools = tuple(self.pools)
        for pool in pools:
            if pool.user_id != self.user_id:
                raise ValueError(
                    f"pool {pool.query_id} belongs to user {pool.user_id!r}, not {self.user_id!r}"
                )
        object.__setattr__(self, "pools", pools)

    def __iter__(self) -> Iterator[CandidatePool]:
        return iter(self.pools)

    def __len__(self) -> int:
        return len(self.pools)

    def all_true(self) -> np.ndarray:
        return np.concatenate([p.true_scores for p in self.pools])

    def same_as(self, other: "UserDataset") -> bool:
        return (
            self.user_id == other.user_id
            and len(self.pools) == len(other.pools)
            and all(a.same_as(b) for a, b in zip(self.pools, other.pools))
        )


class CurvePoint(NamedTuple):
    n: int
    utility: float
    trials: int


@dataclass(frozen=True)
class ScalingCurve:
    points: tuple[CurvePoint, ...]
    label: str = ""

    def __post_init__(self) -> None:
        pts = tuple(CurvePoint(int(n), float(u), int(t)) for n, u, t in self.points)
        if not pts:
            raise ValueError("a scaling curve needs at least one point")
        for prev, cur in zip(pts, pts[1:]):
            if cur.n <= prev.n:
                raise ValueError("curve N values must be strictly increasing")
        for p in pts:
            if p.n < 1:
                raise ValueError(f"N must be >= 1, got {p.n}")
            if p.trials < 1:
                raise ValueError(f"trials must be >= 1 at N={p.n}")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_arrays(
        cls, ns: Iterable[int], utilities: Iterable[float], trials=1, label: str = ""
    ) -> "ScalingCurve":
        ns = list(ns)
        utilities = list(utilities)
        if len(ns) != len(utilities):
            raise ValueError("ns and utilities differ in length")
        if np.ndim(trials) == 0:
            trials = [trials] * len(ns)
        return cls(tuple(zip(ns, utilities, trials)), label)

    @property
    def ns(self) -> np.ndarray:
        return np.array([p.n for p in self.points], dtype=np.int64)

    @property
    def utilities(self) -> np.ndarray:
        return np.array([p.utility for p in self.points], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.points)

    def relabel(self, label: str) -> "ScalingCurve":
        return ScalingCurve(self.points, label)


# --- statistics ------------------------------------------------------------


def _paired(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("correlation needs at least 2 points")
    return x, y


def _is_flat(dev: np.ndarray, x: np.ndarray) -> bool:
    # deviations at round-off level of the data count as zero variance
    scale = float(np.max(np.abs(x))) if x.size else 0.0
    return float(np.max(np.abs(dev))) <= 1e-13 * max(scale, 1e-300)


def pearson(xs, ys) -> Correlation:
    """Sample Pearson correlation, or ``DEGENERATE`` on a zero-variance input."""
    x, y = _paired(xs, ys)
    dx = x - x.mean()
    dy = y - y.mean()
    if _is_flat(dx, x) or _is_flat(dy, y):
        return DEGENERATE
    # r is scale-free; normalising first keeps the dot products clear of under/overflow
    dx = dx / np.max(np.abs(dx))
    dy = dy / np.max(np.abs(dy))
    r = float(np.dot(dx, dy) / np.sqrt(np.dot(dx, dx) * np.dot(dy, dy)))
    return Correlation(min(1.0, max(-1.0, r)))


def average_ranks(values) -> np.ndarray:
    """1-based ranks, ties replaced by the mean of the ranks they span."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    sorted_v = v[order]
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    n = v.size
    while i < n:
        j = i
        while j + 1 < n and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> Correlation:
    x, y = _paired(xs, ys)
    return pearson(average_ranks(x), average_ranks(y))


def _check_grids(predicted: ScalingCurve, observed: ScalingCurve) -> None:
    if not np.array_equal(predicted.ns, observed.ns):
        raise ValueError(
            f"N grids differ: {predicted.ns.tolist()} vs {observed.ns.tolist()}"
        )


def rel_mae(predicted: ScalingCurve, observed: ScalingCurve) -> float:
    _check_grids(predicted, observed)
    obs = observed.utilities
    if np.any(obs == 0.0):
        raise ValueError("relMAE undefined: observed utility equal to 0")
    return float(np.mean(np.abs(predicted.utilities - obs) / np.abs(obs)))


def r_squared(predicted: ScalingCurve, observed: ScalingCurve) -> float:
    _check_grids(predicted, observed)
    if len(observed) < 2:
        raise ValueError("R^2 needs at least 2 points")
    obs = observed.utilities
    ss_tot = float(np.sum((obs - obs.mean()) ** 2))
    if ss_tot == 0.0:
        raise ZeroDivisionError("R^2 undefined: observed curve is constant (SS_tot = 0)")
    ss_res = float(np.sum((obs - predicted.utilities) ** 2))
    return 1.0 - ss_res / ss_tot
