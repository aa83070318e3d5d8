"""Kernel backend selection and the scratch workspace for quadrature loops.

The compiled ``_kernels`` extension is used when it imports; otherwise, or
when ``UMNN_PURE_PYTHON`` is set, the numpy kernels in ``_kernels_py`` are
used. Both expose the same four functions::

    point_forward(Ws, bs, t, h) -> z
    point_backward(Ws, bs, gWs, gbs, t, h, grad_z) -> (grad_t, grad_h)
    quad_forward(Ws, bs, mid, half, h, nodes, weights, ws) -> S
    quad_backward(Ws, bs, gWs, gbs, mid, half, h, scale, nodes, weights, grad_h, ws)

``z`` is the integrand's output pre-activation (the integrand value is
``ELU(z) + 1``), ``S[j] = sum_i weights[i] * f(mid[j] + half[j] * nodes[i], h[j])``
and ``quad_backward`` adds ``sum_i weights[i] * scale[j] * d f / d(params, h)``.
"""
from __future__ import annotations

import contextlib
import os

import numpy as np

from . import _kernels_py

_audits: list[list] = []


def _alloc(shape) -> np.ndarray:
    buf = np.empty(shape, dtype=np.float64)
    for log in _audits:
        log.append(buf.shape)
    return buf


@contextlib.contextmanager
def allocation_audit():
    """Record the shape of every workspace buffer allocated inside the block."""
    log: list = []
    _audits.append(log)
    try:
        yield log
    finally:
        _audits.remove(log)


class Workspace:
    """Scratch buffers for one pass over the quadrature nodes.

    Sized by the batch and the layer widths only, so the same buffers are
    reused for every node whatever the number of nodes.
    """

    def __init__(self, rows: int, sizes):
        sizes = list(sizes)
        self.acts = [_alloc((rows, s)) for s in sizes[1:]]
        width = max(sizes)
        self.delta = _alloc((rows, width))
        self.delta_next = _alloc((rows, width))
        self.scratch = _alloc((rows, width))
        # per-node abscissae, the node-independent part of layer 0, and the
        # running sums of layer-0 gradients (plain and weighted by t)
        self.t = _alloc((rows,))
        self.c0 = _alloc((rows, sizes[1]))
        self.dsum = _alloc((rows, sizes[1]))
        self.dtsum = _alloc((rows, sizes[1]))


_compiled = None
try:
    from . import _kernels as _compiled  # type: ignore[attr-defined]
except ImportError:  # pragma: no cover - depends on the build
    _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

if os.environ.get("UMNN_PURE_PYTHON") or _compiled is None:
    kernels = _kernels_py
    name = "python"
else:
    kernels = _compiled
    name = "compiled"


def available() -> list[str]:
    return sorted(BACKENDS)


def set_backend(backend: str) -> None:
    global kernels, name
    if backend not in BACKENDS:
        raise ValueError(f"backend {backend!r} not available; have {available()}")
    kernels = BACKENDS[backend]
    name = backend


@contextlib.contextmanager
def use_backend(backend: str):
    previous = name
    set_backend(backend)
    try:
        yield
    finally:
        set_backend(previous)
