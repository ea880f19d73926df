"""Kernel backend selection.

Two interchangeable implementations of the classifier's numeric kernels
exist: :mod:`tlextract.kernels.numpy_ops` (pure numpy, always available)
and the optional compiled extension ``tlextract._core``.  Both follow the
same contracts — identical shapes, identical tie-breaking, per-backend
bit-exact determinism — and differ only in summation order, so results
agree to floating-point tolerance.

The active backend is chosen at import time from the ``TLEXTRACT_BACKEND``
environment variable:

* ``auto`` (default): compiled kernels where they win (the sparse fused
  first stage and pooling), BLAS-backed numpy for the dense convolution,
  falling back to numpy everywhere when the extension is not built.
* ``numpy``: the pure-numpy reference for every op.
* ``compiled``: the extension for every op; raises if it is not built.

``set_backend`` switches at runtime; ``get_ops`` returns the active table.
"""

from __future__ import annotations

import os

from ..errors import ToolkitError
from . import numpy_ops

try:  # pragma: no cover - depends on build environment
    from .. import _core
except ImportError:  # pragma: no cover
    _core = None

HAVE_COMPILED = _core is not None

OP_NAMES = (
    "sparse_conv_pool_forward",
    "sparse_conv_pool_backward",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool_forward",
    "maxpool_backward",
)

#: Ops where the hand-written compiled loop beats numpy; the dense
#: convolution stays on numpy in auto mode because tensordot lowers to
#: BLAS, which the naive compiled loop does not outperform.
_COMPILED_WINS = (
    "sparse_conv_pool_forward",
    "sparse_conv_pool_backward",
    "maxpool_forward",
    "maxpool_backward",
)


class OpTable:
    """Named bundle of the six kernel callables."""

    def __init__(self, name: str, source: dict):
        self.name = name
        for op in OP_NAMES:
            setattr(self, op, source[op])

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"OpTable({self.name!r})"


def _build(name: str) -> OpTable:
    if name == "numpy":
        return OpTable("numpy", {op: getattr(numpy_ops, op)
                                 for op in OP_NAMES})
    if name == "compiled":
        if not HAVE_COMPILED:
            raise ToolkitError(
                "compiled kernel backend requested but the extension "
                "module is not built", code="backend-unavailable")
        return OpTable("compiled", {op: getattr(_core, op)
                                    for op in OP_NAMES})
    if name == "auto":
        if not HAVE_COMPILED:
            return _build("numpy")
        table = {op: getattr(numpy_ops, op) for op in OP_NAMES}
        for op in _COMPILED_WINS:
            table[op] = getattr(_core, op)
        return OpTable("auto", table)
    raise ToolkitError(f"unknown kernel backend {name!r}",
                       code="backend-unavailable")


_ACTIVE = _build(os.environ.get("TLEXTRACT_BACKEND", "auto"))


def get_ops() -> OpTable:
    """Return the active op table."""
    return _ACTIVE


def set_backend(name: str) -> OpTable:
    """Switch the active backend ('numpy', 'compiled', or 'auto')."""
    global _ACTIVE
    _ACTIVE = _build(name)
    return _ACTIVE
