"""Kernel backend selection.

The package ships a compiled extension (:mod:`hmnet._core`, Cython) for the
hot kernels and a pure-numpy fallback (:mod:`hmnet._kernels_py`). Selection
happens at import and can be forced with the environment variable
``HMNET_BACKEND``:

* ``auto`` (default): compiled kernel for the ragged event attention when
  the extension is importable, numpy for convolution (BLAS-backed im2col is
  the faster convolution at production channel counts).
* ``native``: compiled kernels for both; raises if the extension is missing.
* ``py``: pure numpy everywhere.

Both backends satisfy identical contracts; they differ only in summation
order, so cross-backend agreement is ~1e-15 relative in double precision.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

from . import _kernels_py
from .errors import ConfigError

try:
    from . import _core
except ImportError:
    _core = None


@dataclass(frozen=True)
class Backend:
    name: str
    conv_impl: str
    esca_impl: str
    conv2d_fwd: Callable
    conv2d_bwd: Callable
    esca_attn_fwd: Callable
    esca_attn_bwd: Callable


def _python_backend() -> Backend:
    return Backend(
        "py", "python", "python",
        _kernels_py.conv2d_fwd, _kernels_py.conv2d_bwd,
        _kernels_py.esca_attn_fwd, _kernels_py.esca_attn_bwd,
    )


def make_backend(mode: str) -> Backend:
    if mode == "py":
        return _python_backend()
    if mode == "native":
        if _core is None:
            raise ConfigError("HMNET_BACKEND=native but the compiled extension is not built")
        return Backend(
            "native", "native", "native",
            _core.conv2d_fwd, _core.conv2d_bwd,
            _core.esca_attn_fwd, _core.esca_attn_bwd,
        )
    if mode == "auto":
        if _core is None:
            return _python_backend()
        return Backend(
            "auto", "python", "native",
            _kernels_py.conv2d_fwd, _kernels_py.conv2d_bwd,
            _core.esca_attn_fwd, _core.esca_attn_bwd,
        )
    raise ConfigError(f"unknown HMNET_BACKEND mode {mode!r}")


_ACTIVE = make_backend(os.environ.get("HMNET_BACKEND", "auto"))


def active_backend() -> Backend:
    return _ACTIVE


def set_backend(mode: str) -> Backend:
    """Swap the process-wide backend (used by benchmarks and parity tests)."""
    global _ACTIVE
    _ACTIVE = make_backend(mode)
    return _ACTIVE


def native_available() -> bool:
    return _core is not None
