"""Monotone scalar maps ``F(x; h) = int_0^x f(t, h) dt + beta`` and their inverse."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, InversionRangeError, NumericError
from .nn import ParamStore
from .quadrature import NetIntegrand, compute_cc_weights, integrate_forward

EVAL_STEPS = 100
TRAIN_STEPS_RANGE = (20, 100)
MAX_DOUBLINGS = 60


class MonotonicBlock:
    """Positive integrand network plus integration settings.

    ``beta`` is not owned by the block; callers supply it (in the flow it is
    one of the embedding network outputs).

    Args:
        integrand: ParamStore with fan-in ``1 + q`` and a single output.
        eval_steps: node count used for evaluation and inversion.
        train_steps: fixed node count, or a ``(low, high)`` range sampled
            uniformly per batch during training.
    """

    def __init__(self, integrand: ParamStore, eval_steps: int = EVAL_STEPS,
                 train_steps: int | tuple[int, int] = 50):
        self.integrand = NetIntegrand(integrand)
        if isinstance(train_steps, tuple):
            lo, hi = train_steps
            if not 2 <= lo <= hi:
                raise ConfigurationError(f"invalid integration step range {train_steps}")
        elif train_steps < 2:
            raise ConfigurationError(f"need at least 2 integration steps, got {train_steps}")
        if eval_steps < 2:
            raise ConfigurationError(f"need at least 2 integration steps, got {eval_steps}")
        self.eval_steps = int(eval_steps)
        self.train_steps = train_steps

    @classmethod
    def create(cls, q: int, hidden, seed: int, **kwargs) -> "MonotonicBlock":
        return cls(NetIntegrand.create(q, hidden, seed).params, **kwargs)

    @property
    def params(self) -> ParamStore:
        return self.integrand.params

    @property
    def q(self) -> int:
        return self.integrand.q

    def sample_steps(self, rng: np.random.Generator) -> int:
        if isinstance(self.train_steps, tuple):
            lo, hi = self.train_steps
            return int(rng.integers(lo, hi + 1))
        return int(self.train_steps)


def _check(block: MonotonicBlock, x, h, beta=None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    if x.ndim != 1 or h.shape != (x.shape[0], block.q):
        raise DimensionError(f"expected x [B] and h [B x {block.q}], got {x.shape} and {h.shape}")
    if beta is not None:
        beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), x.shape)
    return x, h, beta


def umnn_forward(block: MonotonicBlock, x, h, beta, N: int | None = None) -> np.ndarray:
    x, h, beta = _check(block, x, h, beta)
    rule = compute_cc_weights(N or block.eval_steps)
    return integrate_forward(block.integrand, 0.0, x, h, rule) + beta


def umnn_derivative(block: MonotonicBlock, x, h) -> np.ndarray:
    """``dF/dx = f(x, h)``, strictly positive."""
    x, h, _ = _check(block, x, h)
    return block.integrand(x, h)


def umnn_log_derivative(block: MonotonicBlock, x, h) -> np.ndarray:
    """``log f(x, h)`` computed from the pre-activation, finite even where f underflows."""
    x, h, _ = _check(block, x, h)
    z = block.integrand.pre_activation(x, h)
    return np.where(z > 0, np.log1p(np.maximum(z, 0.0)), z)


@dataclass
class InversionStats:
    """Bracket doublings, bisection halvings of the slowest sample, initial bracket width."""
    doublings: int
    iterations: int
    max_width: float


def umnn_invert(block: MonotonicBlock, y, h, beta, N: int | None = None, tol: float = 1e-6,
                return_stats: bool = False):
    """Solve ``F(x; h) = y`` per sample by bracketing and bisection.

    The bracket starts at ``[-1, 1]`` and doubles symmetrically (at most
    ``MAX_DOUBLINGS`` times) until it contains the root. Bisection then runs
    on the unfinished samples until the bracket is at most ``tol`` wide and
    the residual ``|F(x) - y|`` is at most ``tol * max(1, |y|)``; the
    returned midpoint is then within ``tol / 2`` of the root of the
    quadrature-evaluated ``F``.
    """
    if not tol > 0:
        raise ConfigurationError(f"tolerance must be positive, got {tol}")
    y, h, beta = _check(block, y, h, beta)
    if not np.isfinite(y).all():
        raise NumericError("cannot invert non-finite targets")
    rule = compute_cc_weights(N or block.eval_steps)
    target = y - beta

    def F(x, rows=slice(None)):
        return integrate_forward(block.integrand, 0.0, x, h[rows], rule)

    radius = np.ones_like(y)
    doublings = 0
    while True:
        outside = (F(-radius) > target) | (F(radius) < target)
        if not outside.any():
            break
        if doublings == MAX_DOUBLINGS:
            j = int(np.flatnonzero(outside)[0])
            raise InversionRangeError(
                f"no bracket for sample {j} (y={y[j]:.6g}) within +/-2^{MAX_DOUBLINGS}")
        radius = np.where(outside, 2.0 * radius, radius)
        doublings += 1

    lo, hi = -radius, radius.copy()
    slack = tol * np.maximum(1.0, np.abs(y))
    x = np.empty_like(y)
    todo = np.arange(y.shape[0])
    iterations = 0
    while todo.size:
        a, b = lo[todo], hi[todo]
        mid = 0.5 * (a + b)
        resid = F(mid, todo) - target[todo]
        # a midpoint equal to an end means the bracket cannot shrink in floating point
        finished = ((b - a <= tol) & (np.abs(resid) <= slack[todo])) | (mid <= a) | (mid >= b)
        x[todo[finished]] = mid[finished]
        below = resid < 0
        lo[todo] = np.where(below, mid, a)
        hi[todo] = np.where(below, b, mid)
        todo = todo[~finished]
        iterations += bool(todo.size)
    if return_stats:
        return x, InversionStats(doublings, iterations, float((2 * radius).max(initial=0.0)))
    return x


def bisection_iteration_bound(width: float, tol: float) -> int:
    return max(0, math.ceil(math.log2(width / tol)))
