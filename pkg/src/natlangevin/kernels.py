"""Backend selection for the quasi-diagonal kernels.

The compiled module ``_qdkernels`` is used when it was built and
``NATLANGEVIN_PURE`` is unset; otherwise the numpy versions take over. Both
expose the same functions, wrapped here to accept a :class:`BlockLayout`.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("NATLANGEVIN_PURE", "") not in ("", "0"):
        raise ImportError("pure backend requested")
    from . import _qdkernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"


class _Backend:
    def __init__(self, name):
        self.name = name

    def qd_factor(self, diag, row0, eps, floor, layout, adiag, arow):
        if self.name == "cython":
            return _compiled.qd_factor(
                diag, row0, float(eps), float(floor), layout.offsets_array, layout.sizes_array, adiag, arow
            )
        return _kernels_py.qd_factor(diag, row0, eps, floor, layout, adiag, arow)

    def qd_apply(self, adiag, arow, g, layout, out=None):
        if out is None:
            out = np.empty_like(g)
        if self.name == "cython":
            _compiled.qd_apply(adiag, arow, g, layout.offsets_array, layout.sizes_array, out)
            return out
        return _kernels_py.qd_apply(adiag, arow, g, layout, out)

    def qd_lower(self, adiag, arow, z, layout, out=None):
        if out is None:
            out = np.empty_like(z)
        if self.name == "cython":
            _compiled.qd_lower(adiag, arow, z, layout.offsets_array, layout.sizes_array, out)
            return out
        return _kernels_py.qd_lower(adiag, arow, z, layout, out)

    def qd_rank_one(self, diag, row0, u, gamma, layout):
        if self.name == "cython":
            _compiled.qd_rank_one(diag, row0, u, float(gamma), layout.offsets_array, layout.sizes_array)
        else:
            _kernels_py.qd_rank_one(diag, row0, u, gamma, layout)


def get_backend(name: str | None = None) -> _Backend:
    name = name or BACKEND
    if name == "cython" and _compiled is None:
        raise RuntimeError("compiled kernels are not available; rebuild the extension")
    if name not in ("cython", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    return _Backend(name)


def available_backends() -> list[str]:
    return ["numpy"] + (["cython"] if _compiled is not None else [])
