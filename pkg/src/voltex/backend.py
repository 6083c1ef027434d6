"""Kernel backend selection.

The per-voxel hot loops (separable convolution, median windows,
salt-and-pepper painting) ship in two functionally identical flavours: a
numba-jitted one and a pure-numpy one. By default the numba flavour is
used whenever numba imports cleanly. Set ``VOLTEX_BACKEND=numpy`` to
force the fallback (or ``=numba`` to insist on the JIT and fail loudly
if it is unavailable).

Both flavours produce bit-identical outputs for identical inputs, which
the test suite asserts.
"""

from __future__ import annotations

import importlib
import os

ENV_VAR = "VOLTEX_BACKEND"
CHOICES = ("auto", "numba", "numpy")

_active: str | None = None


def _resolve(requested: str) -> str:
    if requested == "numpy":
        return "numpy"
    if requested == "numba":
        importlib.import_module("voltex._kernels_numba")
        return "numba"
    try:
        importlib.import_module("voltex._kernels_numba")
        return "numba"
    except ImportError:
        return "numpy"


def active() -> str:
    """Name of the backend in use: ``"numba"`` or ``"numpy"``."""
    global _active
    if _active is None:
        requested = os.environ.get(ENV_VAR, "auto").strip().lower() or "auto"
        if requested not in CHOICES:
            raise ValueError(f"{ENV_VAR} must be one of {CHOICES}, got {requested!r}")
        _active = _resolve(requested)
    return _active


def set_backend(name: str) -> str:
    """Switch backends at runtime (used by tests and benchmarks)."""
    global _active
    if name not in CHOICES:
        raise ValueError(f"backend must be one of {CHOICES}, got {name!r}")
    _active = _resolve(name)
    return _active


def kernels():
    """The module implementing the hot kernels for the active backend."""
    if active() == "numba":
        from voltex import _kernels_numba as mod
    else:
        from voltex import _kernels_numpy as mod
    return mod
