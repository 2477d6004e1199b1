"""Wavelet-space variational autoencoders on a self-contained autodiff core.

Submodules are imported lazily so the command-line front end can configure
threading environment variables before numpy loads.
"""

import importlib

from .errors import (
    ConfigError,
    FormatError,
    NumericsError,
    ShapeError,
    TapeError,
    WvaeError,
)

__version__ = "0.1.0"

_LAZY = {
    "Rng": "rng",
    "Tensor": "tensor",
    "no_grad": "tensor",
    "sample_normal": "tensor",
}

__all__ = [
    "ConfigError",
    "FormatError",
    "NumericsError",
    "Rng",
    "ShapeError",
    "TapeError",
    "Tensor",
    "WvaeError",
    "no_grad",
    "sample_normal",
    "__version__",
]


def __getattr__(name):
    if name in _LAZY:
        module = importlib.import_module(f".{_LAZY[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
