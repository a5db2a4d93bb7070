"""Binarization-aware training and packed 1-bit inference for small
selective state-space language models.

Submodules are imported lazily so the command-line entry point can pin
BLAS/OMP thread counts before numpy is first loaded.
"""

from __future__ import annotations

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor",
    "fbi",
    "ssd",
    "model",
    "data",
    "train",
    "store",
    "bench",
    "cli",
)

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name: str):
    if name in _SUBMODULES:
        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
