"""Pure numpy implementation of the subsample-and-select kernel.

Must stay bit-compatible with ``_kernels.pyx``: same candidate keys, same
subset rule (the ``n`` smallest ``(key, index)`` pairs), same tie-breaking
(lowest candidate index wins).
"""

from __future__ import annotations

import numpy as np

from .rng import candidate_keys

ORACLE, RANDOM, MEAN, LCB, UCB, VARFILTER, SNR = range(7)

_PAD = np.uint64(0xFFFFFFFFFFFFFFFF)


def snr_scores(mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    sd = np.sqrt(var)
    out = np.where(mean > 0, np.inf, np.where(mean < 0, -np.inf, 0.0))
    pos = sd > 0
    np.divide(mean, sd, out=out, where=pos)
    return out


def subsample_select(
    true: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    sizes: np.ndarray,
    cell_keys: np.ndarray,
    n: int,
    code: int,
    beta: float,
    keep: int,
) -> np.ndarray:
    """True score of the selected candidate for each padded pool row.

    ``true``/``mean``/``var`` are (P, K) row-padded arrays, ``sizes`` the
    real pool sizes, ``cell_keys`` one uint64 stream key per row. ``beta``
    is the LCB/UCB multiplier and ``keep`` the VarFilter survivor count.
    """
    n_pools, width = true.shape
    if n_pools and int(sizes.min()) < n:
        raise ValueError("pool smaller than subset size")
    keys = candidate_keys(cell_keys, width)
    keys[np.arange(width)[None, :] >= sizes[:, None]] = _PAD
    order = np.argsort(keys, axis=1, kind="stable")[:, :n]
    rows = np.arange(n_pools)[:, None]

    if code == RANDOM:
        return true[np.arange(n_pools), order[:, 0]]

    idx = np.sort(order, axis=1)
    if code == ORACLE:
        score = true[rows, idx]
    elif code == MEAN:
        score = mean[rows, idx]
    elif code == LCB:
        score = mean[rows, idx] - beta * np.sqrt(var[rows, idx])
    elif code == UCB:
        score = mean[rows, idx] + beta * np.sqrt(var[rows, idx])
    elif code == SNR:
        score = snr_scores(mean[rows, idx], var[rows, idx])
    elif code == VARFILTER:
        by_var = np.argsort(var[rows, idx], axis=1, kind="stable")[:, :keep]
        idx = np.take_along_axis(idx, np.sort(by_var, axis=1), axis=1)
        score = mean[rows, idx]
    else:
        raise ValueError(f"unknown strategy code {code}")
    best = np.argmax(score, axis=1)
    return true[np.arange(n_pools), idx[np.arange(n_pools), best]]
