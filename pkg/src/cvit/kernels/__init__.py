"""Convolution kernel backend, chosen once at import time.

`CVIT_KERNELS` selects the backend: "compiled" (Cython extension),
"pure" (numpy im2col), or "auto" (compiled when available). A fixed
backend per process keeps training runs bit-reproducible.
"""

import os

from ..errors import ConfigError
from . import pure

try:
    from . import _conv as _compiled
except ImportError:
    _compiled = None

_choice = os.environ.get("CVIT_KERNELS", "auto")
if _choice not in ("auto", "compiled", "pure"):
    raise ConfigError(f"CVIT_KERNELS must be auto|compiled|pure, got {_choice!r}")
if _choice == "compiled" and _compiled is None:
    raise ConfigError("CVIT_KERNELS=compiled but the extension is not built")

_active = pure if _choice == "pure" or _compiled is None else _compiled


def active_backend() -> str:
    """Name of the backend in use ("compiled" or "pure")."""
    return _active.NAME


def compiled_available() -> bool:
    return _compiled is not None


def backends():
    """All importable backends, for benchmarks and equivalence tests."""
    return {m.NAME: m for m in (pure, _compiled) if m is not None}


def conv2d_forward(x, w, stride, pad):
    return _active.conv2d_forward(x, w, stride, pad)


def conv2d_grad_input(dy, w, stride, pad, h, w_in):
    return _active.conv2d_grad_input(dy, w, stride, pad, h, w_in)


def conv2d_grad_weight(x, dy, k, stride, pad):
    return _active.conv2d_grad_weight(x, dy, k, stride, pad)
