"""Hot-kernel dispatch: the compiled extension when built, numpy otherwise.

Set ``BONLAW_PURE_PYTHON=1`` to force the numpy fallback. Both backends
produce bit-identical results; ``BACKEND`` names the one in use.
"""

from __future__ import annotations

import os

from . import _kernels_py
from ._kernels_py import ORACLE, RANDOM, MEAN, LCB, UCB, VARFILTER, SNR  # noqa: F401

_compiled = None
if os.environ.get("BONLAW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def get_backend(name: str | None = None):
    """Return the kernel module called ``name`` (default: the active one)."""
    if name is None:
        name = BACKEND
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available in this build")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def compiled_available() -> bool:
    return _compiled is not None


def subsample_select(true, mean, var, sizes, cell_keys, n, code, beta=0.0, keep=1, backend=None):
    mod = get_backend(backend)
    keep = max(1, min(int(keep), int(n)))
    return mod.subsample_select(true, mean, var, sizes, cell_keys, int(n), int(code), float(beta), keep)
