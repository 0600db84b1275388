"""Seeded random streams.

Two generators are used, both stateless with respect to execution order:

* ``cell_generator(seed, *path)`` returns a numpy ``Generator`` over the
  Philox4x64-10 counter-based bit generator, keyed by a ``SeedSequence``
  whose spawn key is ``path``. Used for population and feature generation;
  every (user, query) cell gets its own independent stream.

* ``mix64`` / ``cell_key`` / ``candidate_keys`` form a SplitMix64-style
  counter hash. The subsampling kernels draw one 64-bit key per candidate
  from it; the compiled and pure-Python kernels implement the identical
  arithmetic so they agree bit for bit.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def cell_generator(seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & MASK64, spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def mix64(z: int) -> int:
    """SplitMix64 finaliser on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def combine(h: int, v: int) -> int:
    return mix64(((h ^ (v & MASK64)) + GOLDEN) & MASK64)


def cell_key(seed: int, *path: int) -> int:
    h = mix64(int(seed) & MASK64)
    for v in path:
        h = combine(h, int(v))
    return h


def mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_M1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_M2)
    z ^= z >> np.uint64(31)
    return z


def combine_array(h: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorised ``combine``; uint64 arithmetic wraps modulo 2**64."""
    z = np.bitwise_xor(h.astype(np.uint64), v.astype(np.uint64))
    z += np.uint64(GOLDEN)
    return mix64_array(z)


def candidate_keys(cell_keys: np.ndarray, n_candidates: int) -> np.ndarray:
    """Per-candidate keys, shape (len(cell_keys), n_candidates)."""
    h = np.asarray(cell_keys, dtype=np.uint64)[:, None]
    j = np.arange(n_candidates, dtype=np.uint64)[None, :]
    return combine_array(np.broadcast_to(h, (h.shape[0], n_candidates)), np.broadcast_to(j, (h.shape[0], n_candidates)))
