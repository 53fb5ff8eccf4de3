"""Backend selection for the hot kernels.

The compiled ``_speedups`` extension is preferred; the pure-Python module is
used when the extension was not built or ``VSPAN_PURE_PYTHON`` is set.
Both expose ``stab`` and ``covered_length`` over ``array('q')`` buffers.
"""
from __future__ import annotations

import importlib
import os
from types import ModuleType

from . import _purepy


def load_backend(name: str) -> ModuleType:
    if name == "python":
        return _purepy
    if name == "compiled":
        return importlib.import_module("vspan._speedups")
    raise ValueError(f"unknown kernel backend {name!r}")


def _select() -> tuple[str, ModuleType]:
    if os.environ.get("VSPAN_PURE_PYTHON", "") not in ("", "0"):
        return "python", _purepy
    try:
        return "compiled", load_backend("compiled")
    except ImportError:
        return "python", _purepy


BACKEND, _impl = _select()

stab = _impl.stab
covered_length = _impl.covered_length
