"""Best-of-N selection strategies and Monte Carlo utility curves."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .core import CandidatePool, ScalingCurve, UserDataset
from .rng import MASK64, combine_array, mix64

_CODES = {
    "oracle": kernels.ORACLE,
    "random": kernels.RANDOM,
    "mean": kernels.MEAN,
    "lcb": kernels.LCB,
    "ucb": kernels.UCB,
    "varfilter": kernels.VARFILTER,
    "snr": kernels.SNR,
}
_PARAMETRIC = {"lcb", "ucb", "varfilter"}
_NEEDS_MEAN = {"mean", "lcb", "ucb", "varfilter", "snr"}
_NEEDS_VAR = {"lcb", "ucb", "varfilter", "snr"}


@dataclass(frozen=True)
class Strategy:
    """A selection rule. ``param`` is beta for LCB/UCB and p for VarFilter."""

    kind: str
    param: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in _CODES:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.kind in ("lcb", "ucb") and not self.param >= 0:
            raise ValueError(f"{self.kind} beta must be >= 0")
        if self.kind == "varfilter" and not 0.0 <= self.param < 1.0:
            raise ValueError("varfilter p must lie in [0, 1)")
        if self.kind not in _PARAMETRIC and self.param != 0.0:
            raise ValueError(f"{self.kind} takes no parameter")

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        """Parse CLI forms such as ``mean``, ``lcb:0.5`` or ``varfilter:0.2``."""
        name, _, arg = text.strip().lower().partition(":")
        if name in _PARAMETRIC:
            if not arg:
                raise ValueError(f"strategy {name!r} needs a parameter, e.g. {name}:0.5")
            return cls(name, float(arg))
        if arg:
            raise ValueError(f"strategy {name!r} takes no parameter")
        return cls(name)

    def __str__(self) -> str:
        if self.kind in _PARAMETRIC:
            return f"{self.kind}:{self.param:g}"
        return self.kind

    @property
    def code(self) -> int:
        return _CODES[self.kind]

    @property
    def needs_mean(self) -> bool:
        return self.kind in _NEEDS_MEAN

    @property
    def needs_var(self) -> bool:
        return self.kind in _NEEDS_VAR

    def keep_count(self, n: int) -> int:
        """Survivors of the variance filter among ``n`` candidates."""
        if self.kind != "varfilter":
            return n
        return max(1, math.ceil((1.0 - self.param) * n - 1e-9))


ALL_STRATEGIES = ("oracle", "random", "mean", "lcb:0.5", "ucb:0.5", "varfilter:0.2", "snr")


def _check_fields(pool: CandidatePool, strategy: Strategy) -> None:
    if strategy.needs_mean and pool.pred_mean is None:
        raise ValueError(f"strategy {strategy} needs pred_mean (pool {pool.user_id}/{pool.query_id})")
    if strategy.needs_var and pool.pred_var is None:
        raise ValueError(f"strategy {strategy} needs pred_var (pool {pool.user_id}/{pool.query_id})")


def select_best(pool: CandidatePool, strategy: Strategy, rng: np.random.Generator | None = None) -> int:
    """Index of the chosen candidate; ties go to the lowest index."""
    _check_fields(pool, strategy)
    kind = strategy.kind
    if kind == "oracle":
        return int(np.argmax(pool.true_scores))
    if kind == "random":
        if rng is None:
            raise ValueError("random strategy needs an rng")
        return int(rng.integers(len(pool)))
    mu = pool.pred_mean
    if kind == "mean":
        return int(np.argmax(mu))
    var = pool.pred_var
    if kind == "lcb":
        return int(np.argmax(mu - strategy.param * np.sqrt(var)))
    if kind == "ucb":
        return int(np.argmax(mu + strategy.param * np.sqrt(var)))
    if kind == "snr":
        from ._kernels_py import snr_scores

        return int(np.argmax(snr_scores(mu, var)))
    # varfilter: drop the highest-variance candidates, keep at least one
    keep = strategy.keep_count(len(pool))
    survivors = np.sort(np.argsort(var, kind="stable")[:keep])
    return int(survivors[np.argmax(mu[survivors])])


@dataclass(frozen=True)
class CurveRequest:
    n_grid: tuple[int, ...] = (1, 5, 10, 15, 20, 30)
    trials: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        grid = tuple(int(n) for n in self.n_grid)
        if not grid:
            raise ValueError("n_grid is empty")
        if any(n < 1 for n in grid):
            raise ValueError("n_grid values must be >= 1")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("n_grid must be strictly increasing")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        object.__setattr__(self, "n_grid", grid)


@dataclass(frozen=True, eq=False)
class PackedPools:
    """Row-padded arrays over every pool of a population, in dataset order."""

    true: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    sizes: np.ndarray
    has_mean: bool
    has_var: bool

    @classmethod
    def pack(cls, datasets: Sequence[UserDataset]) -> "PackedPools":
        pools = [p for d in datasets for p in d.pools]
        if not pools:
            raise ValueError("no pools to pack")
        width = max(len(p) for p in pools)
        shape = (len(pools), width)
        true = np.zeros(shape)
        mean = np.zeros(shape)
        var = np.zeros(shape)
        sizes = np.empty(len(pools), dtype=np.int64)
        has_mean = all(p.pred_mean is not None for p in pools)
        has_var = all(p.pred_var is not None for p in pools)
        for i, p in enumerate(pools):
            k = len(p)
            sizes[i] = k
            true[i, :k] = p.true_scores
            if has_mean:
                mean[i, :k] = p.pred_mean
            if has_var:
                var[i, :k] = p.pred_var
        return cls(true, mean, var, sizes, has_mean, has_var)

    @property
    def n_pools(self) -> int:
        return self.sizes.size


def _cell_keys(seed: int, n_pools: int, trial: int, n: int) -> np.ndarray:
    base = np.full(n_pools, mix64(int(seed) & MASK64), dtype=np.uint64)
    h = combine_array(base, np.arange(n_pools, dtype=np.uint64))
    h = combine_array(h, np.full(n_pools, trial, dtype=np.uint64))
    return combine_array(h, np.full(n_pools, n, dtype=np.uint64))


def selection_matrix(
    packed: PackedPools,
    strategy: Strategy,
    req: CurveRequest,
    threads: int = 1,
    backend: str | None = None,
) -> np.ndarray:
    """True scores of every selection, shape (len(n_grid), trials, n_pools).

    Each (pool, trial, N) cell has its own counter-derived stream, so the
    result does not depend on ``threads`` or on the kernel backend.
    """
    if strategy.needs_mean and not packed.has_mean:
        raise ValueError(f"strategy {strategy} needs pred_mean on every pool")
    if strategy.needs_var and not packed.has_var:
        raise ValueError(f"strategy {strategy} needs pred_var on every pool")
    smallest = int(packed.sizes.min())
    if req.n_grid[-1] > smallest:
        raise ValueError(f"N={req.n_grid[-1]} exceeds the smallest pool size {smallest}")

    out = np.empty((len(req.n_grid), req.trials, packed.n_pools))
    cells = [(i, n, t) for i, n in enumerate(req.n_grid) for t in range(req.trials)]

    def run(cell):
        i, n, t = cell
        keys = _cell_keys(req.seed, packed.n_pools, t, n)
        out[i, t] = kernels.subsample_select(
            packed.true, packed.mean, packed.var, packed.sizes, keys, n,
            strategy.code, strategy.param, strategy.keep_count(n), backend=backend,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(run, cells))
    else:
        for cell in cells:
            run(cell)
    return out


def estimate_utility_curve(
    datasets: Sequence[UserDataset] | PackedPools,
    strategy: Strategy,
    req: CurveRequest,
    threads: int = 1,
    backend: str | None = None,
    label: str | None = None,
) -> ScalingCurve:
    """Mean true score of the selected candidate at every N of the grid."""
    packed = datasets if isinstance(datasets, PackedPools) else PackedPools.pack(datasets)
    mat = selection_matrix(packed, strategy, req, threads=threads, backend=backend)
    utilities = [float(np.mean(mat[i])) for i in range(len(req.n_grid))]
    return ScalingCurve.from_arrays(
        req.n_grid, utilities, req.trials, label=str(strategy) if label is None else label
    )


def utility_standard_errors(mat: np.ndarray) -> np.ndarray:
    """Standard error per grid point, treating trial means as replicates."""
    trial_means = mat.mean(axis=2)
    if trial_means.shape[1] < 2:
        return np.full(trial_means.shape[0], np.nan)
    return trial_means.std(axis=1, ddof=1) / math.sqrt(trial_means.shape[1])
