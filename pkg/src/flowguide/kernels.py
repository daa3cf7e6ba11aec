"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it is importable; otherwise
the numpy implementations in ``_kernels_py`` are. Set ``FLOWGUIDE_BACKEND`` to
``python`` or ``cython`` to force one (forcing ``cython`` when it is missing
raises ImportError).
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _kernels_py


def _load_compiled() -> ModuleType | None:
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


compiled = _load_compiled()


def available() -> dict[str, ModuleType]:
    out = {"python": _kernels_py}
    if compiled is not None:
        out["cython"] = compiled
    return out


def select(name: str | None = None) -> ModuleType:
    name = (name or os.environ.get("FLOWGUIDE_BACKEND") or "auto").lower()
    if name == "python":
        return _kernels_py
    if name == "cython":
        if compiled is None:
            raise ImportError("FLOWGUIDE_BACKEND=cython but flowguide._ckernels is not built")
        return compiled
    if name != "auto":
        raise ValueError(f"unknown backend {name!r}")
    return compiled if compiled is not None else _kernels_py


backend = select()
BACKEND = backend.NAME


def grouped_attention(q, k, v, passthrough, order, offsets, heads, exclude_self):
    return backend.grouped_attention(q, k, v, passthrough, order, offsets, heads, exclude_self)


def bilinear_warp(image, fx, fy):
    return backend.bilinear_warp(image, fx, fy)


def use(name: str) -> None:
    """Switch the active backend for this process."""
    global backend, BACKEND
    backend = select(name)
    BACKEND = backend.NAME
