"""Clenshaw-Curtis quadrature of conditioned integrands.

``integrate_forward`` computes ``F[j] = int_{x0[j]}^{x[j]} f(t, h[j]) dt`` on
Chebyshev-extrema nodes. ``integrate_backward`` differentiates it by
integrating the gradient (Leibniz rule): the upper-bound derivative is the
integrand itself, and the parameter/embedding gradients are quadrature sums
of per-node backward passes. The backward pass walks the nodes one at a time
through fixed scratch buffers, so its memory does not grow with the number of
nodes.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import ConfigurationError, DimensionError, NumericError
from .nn import ParamStore, elu_plus_one, elu_plus_one_grad, init_mlp


@dataclass(frozen=True)
class QuadRule:
    N: int
    nodes: np.ndarray
    weights: np.ndarray

    def reduce(self, values: np.ndarray) -> np.ndarray:
        """``sum_i weights[i] * values[i]`` over axis 0, pairing mirrored nodes.

        Adding ``values[i]`` and ``values[N-1-i]`` before weighting makes the
        rule return exactly zero for odd integrands on symmetric intervals.
        """
        n = self.N
        k = n // 2
        total = self.weights[:k] @ (values[:k] + values[::-1][:k])
        if n % 2:
            total = total + self.weights[k] * values[k]
        return total


@functools.lru_cache(maxsize=None)
def _cc_rule(N: int) -> QuadRule:
    n = N - 1
    k = np.arange(N)
    theta = np.pi * k / n
    nodes = np.cos(theta)
    # exact mirror symmetry and an exact zero for the middle node
    nodes[N // 2:] = -nodes[: (N + 1) // 2][::-1]
    if N % 2:
        nodes[N // 2] = 0.0
    j = np.arange(1, n // 2 + 1)
    b = np.where(2 * j == n, 1.0, 2.0)
    series = (b / (4.0 * j * j - 1.0)) @ np.cos(2.0 * np.outer(j, theta))
    c = np.full(N, 2.0)
    c[0] = c[-1] = 1.0
    weights = c / n * (1.0 - series)
    weights = 0.5 * (weights + weights[::-1])
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadRule(N, nodes, weights)


def compute_cc_weights(N: int) -> QuadRule:
    """Nodes ``cos(pi k / (N - 1))`` and closed-form Clenshaw-Curtis weights."""
    if int(N) != N or N < 2:
        raise ConfigurationError(f"Clenshaw-Curtis rule needs N >= 2 nodes, got {N}")
    return _cc_rule(int(N))


class Integrand:
    """A strictly positive ``f(t, h)`` evaluated row-wise.

    Subclasses provide ``__call__`` and, for gradients, ``backward``.
    ``params`` is the :class:`ParamStore` receiving parameter gradients, or
    ``None`` for fixed functions.
    """

    params: ParamStore | None = None

    def __call__(self, t: np.ndarray, h: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, t, h, grad):
        """Accumulate ``grad * df/dtheta`` into ``params``; return ``(df/dt * grad, df/dh * grad)``."""
        raise NotImplementedError


class FunctionIntegrand(Integrand):
    """Wrap a plain ``fn(t, h)`` with optional analytic partials."""

    def __init__(self, fn, dfdt=None, dfdh=None):
        self.fn = fn
        self.dfdt = dfdt
        self.dfdh = dfdh

    def __call__(self, t, h):
        return np.asarray(self.fn(t, h), dtype=np.float64)

    def backward(self, t, h, grad):
        gt = grad * self.dfdt(t, h) if self.dfdt is not None else np.zeros_like(t)
        gh = grad[:, None] * self.dfdh(t, h) if self.dfdh is not None else np.zeros_like(h)
        return gt, gh


class NetIntegrand(Integrand):
    """Squareplus MLP on ``[t, h]`` with an ``ELU + 1`` output unit.

    Smooth hidden units keep the integrand free of kinks in ``t``, so the
    quadrature converges quickly. Node loops run in the selected kernel backend.
    """

    def __init__(self, params: ParamStore):
        if params.n_out != 1:
            raise ConfigurationError("integrand network must have a single output")
        if any(m is not None for m in params.masks):
            raise ConfigurationError("integrand network must be unmasked")
        self.params = params

    @classmethod
    def create(cls, q: int, hidden, seed: int) -> "NetIntegrand":
        return cls(init_mlp([1 + q, *hidden, 1], seed))

    @property
    def q(self) -> int:
        return self.params.n_in - 1

    def _check(self, t, h):
        t = np.ascontiguousarray(t, dtype=np.float64)
        h = np.ascontiguousarray(h, dtype=np.float64)
        if t.ndim != 1 or h.shape != (t.shape[0], self.q):
            raise DimensionError(f"integrand expects t [B] and h [B x {self.q}], got {t.shape}, {h.shape}")
        return t, h

    def pre_activation(self, t, h) -> np.ndarray:
        t, h = self._check(t, h)
        return _backend.kernels.point_forward(self.params.weights, self.params.biases, t, h)

    def __call__(self, t, h):
        return elu_plus_one(self.pre_activation(t, h))

    def backward_pre(self, t, h, grad_z):
        """Backward from a gradient on the output pre-activation."""
        t, h = self._check(t, h)
        p = self.params
        return _backend.kernels.point_backward(
            p.weights, p.biases, p.grad_weights, p.grad_biases, t, h,
            np.ascontiguousarray(grad_z, dtype=np.float64))

    def backward(self, t, h, grad):
        z = self.pre_activation(t, h)
        return self.backward_pre(t, h, grad * elu_plus_one_grad(z))

    def quad_sum(self, mid, half, h, rule: QuadRule) -> np.ndarray:
        p = self.params
        ws = _backend.Workspace(mid.shape[0], p.sizes)
        return _backend.kernels.quad_forward(p.weights, p.biases, mid, half, h,
                                             rule.nodes, rule.weights, ws)

    def quad_backward(self, mid, half, h, scale, rule: QuadRule, grad_h) -> None:
        p = self.params
        ws = _backend.Workspace(mid.shape[0], p.sizes)
        _backend.kernels.quad_backward(p.weights, p.biases, p.grad_weights, p.grad_biases,
                                       mid, half, h, scale, rule.nodes, rule.weights, grad_h, ws)


def _as_integrand(f) -> Integrand:
    if isinstance(f, Integrand):
        return f
    if callable(f):
        return FunctionIntegrand(f)
    raise TypeError(f"not an integrand: {f!r}")


def _prepare(x0, x, h):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"x must be a vector, got shape {x.shape}")
    x0 = np.ascontiguousarray(np.broadcast_to(np.asarray(x0, dtype=np.float64), x.shape))
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1 and h.shape[0] == 0:
        h = h.reshape(x.shape[0], 0)
    h = np.ascontiguousarray(h)
    if h.ndim != 2 or h.shape[0] != x.shape[0]:
        raise DimensionError(f"h must be [B x q] with B = {x.shape[0]}, got {h.shape}")
    if not (np.isfinite(x).all() and np.isfinite(x0).all() and np.isfinite(h).all()):
        raise NumericError("non-finite integration bounds or embedding")
    mid = 0.5 * (x0 + x)
    half = 0.5 * (x - x0)
    return x0, x, h, mid, half


def _first_bad_node(f: Integrand, mid, half, h, rule: QuadRule) -> int:
    for i, node in enumerate(rule.nodes):
        if not np.isfinite(f(mid + half * node, h)).all():
            return i
    return -1


def integrate_forward(f, x0, x, h, rule: QuadRule) -> np.ndarray:
    """``(x - x0) / 2 * sum_i w_i f(x_i, h)`` with ``x_i`` the mapped nodes."""
    f = _as_integrand(f)
    x0, x, h, mid, half = _prepare(x0, x, h)
    B, N = x.shape[0], rule.N
    if isinstance(f, NetIntegrand):
        S = f.quad_sum(mid, half, h, rule)
    else:
        t = mid[None, :] + half[None, :] * rule.nodes[:, None]
        hh = np.broadcast_to(h, (N, B, h.shape[1])).reshape(N * B, h.shape[1])
        vals = f(t.ravel(), hh).reshape(N, B)
        if not np.isfinite(vals).all():
            i = int(np.argmax(~np.isfinite(vals).all(axis=1)))
            raise NumericError(f"non-finite integrand value at quadrature node {i} "
                               f"(delta_x = {rule.nodes[i]:.17g})")
        S = rule.reduce(vals)
    if not np.isfinite(S).all():
        i = _first_bad_node(f, mid, half, h, rule)
        raise NumericError(f"non-finite integrand value at quadrature node {i}")
    return half * S


def integrate_backward(f, x0, x, h, grad_out, rule: QuadRule):
    """Gradients of ``integrate_forward`` w.r.t. ``x`` and ``h``.

    Parameter gradients are added to ``f.params``. Returns ``(grad_x, grad_h)``.
    """
    f = _as_integrand(f)
    x0, x, h, mid, half = _prepare(x0, x, h)
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    if grad_out.shape != x.shape:
        raise DimensionError(f"grad_out {grad_out.shape} != x {x.shape}")
    fx = f(x, h)
    if not np.isfinite(fx).all():
        raise NumericError("non-finite integrand value at the upper bound")
    grad_x = fx * grad_out
    grad_h = np.zeros_like(h)
    scale = half * grad_out
    if isinstance(f, NetIntegrand):
        f.quad_backward(mid, half, h, scale, rule, grad_h)
    else:
        for i in range(rule.N):
            _, gh = f.backward(mid + half * rule.nodes[i], h, rule.weights[i] * scale)
            grad_h += gh
    if not np.isfinite(grad_h).all():
        raise NumericError("non-finite gradient w.r.t. the embedding")
    return grad_x, grad_h
