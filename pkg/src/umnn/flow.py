"""UMNN-MAF: masked autoregressive embeddings driving a shared monotonic block.

For one step with input ``x`` (after the step's permutation), a MADE network
produces for every dimension ``i`` an embedding ``h^i`` (``q`` values) and an
offset ``beta^i`` that depend on ``x_{<i}`` only. Then
``z_i = int_0^{x_i} f(t, h^i) dt + beta^i`` with one integrand ``f`` shared by
all dimensions, and ``log |det J| = sum_i log f(x_i, h^i)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, InversionRangeError, NumericError
from .monotonic import EVAL_STEPS, MonotonicBlock, umnn_invert
from .nn import Output, ParamStore, init_mlp, mlp_backward, mlp_forward
from .quadrature import compute_cc_weights, integrate_backward, integrate_forward

LOG_2PI = float(np.log(2.0 * np.pi))


def build_made_masks(d: int, hidden_sizes, q: int) -> list[np.ndarray]:
    """Binary masks, one per layer, shaped ``(out, in)`` like the weights.

    Inputs have degrees ``1..d``; hidden units cycle through ``1..d-1``
    (all degree 1 when ``d == 1``); output block ``i`` (``q + 1`` units) has
    degree ``i`` and only sees hidden units of strictly lower degree, so
    ``(h^i, beta^i)`` depends on ``x_1..x_{i-1}`` only.
    """
    if d < 1:
        raise ConfigurationError(f"data dimension must be >= 1, got {d}")
    degrees = [np.arange(1, d + 1)]
    for size in hidden_sizes:
        degrees.append(np.arange(size) % max(d - 1, 1) + 1)
    masks = [(hi[:, None] >= lo[None, :]).astype(np.float64)
             for lo, hi in zip(degrees[:-1], degrees[1:])]
    out_deg = np.repeat(np.arange(1, d + 1), q + 1)
    masks.append((out_deg[:, None] > degrees[-1][None, :]).astype(np.float64))
    return masks


class MadeNet:
    def __init__(self, params: ParamStore, d: int, q: int):
        if params.n_in != d or params.n_out != d * (q + 1):
            raise DimensionError(f"MADE layout {params.sizes} incompatible with d={d}, q={q}")
        self.params = params
        self.d = d
        self.q = q

    @classmethod
    def create(cls, d: int, hidden, q: int, seed: int) -> "MadeNet":
        hidden = list(hidden)
        masks = build_made_masks(d, hidden, q)
        return cls(init_mlp([d, *hidden, d * (q + 1)], seed, masks), d, q)

    @property
    def hidden(self) -> list[int]:
        return self.params.sizes[1:-1]

    def forward(self, x):
        """Returns ``h`` ``[B, d, q]``, ``beta`` ``[B, d]`` and the tape."""
        out, tape = mlp_forward(self.params, x, Output.LINEAR)
        out = out.reshape(x.shape[0], self.d, self.q + 1)
        return out[:, :, : self.q], out[:, :, self.q], tape


class FlowStep:
    def __init__(self, made: MadeNet, block: MonotonicBlock, permutation=None):
        if made.q != block.q:
            raise ConfigurationError(f"embedding size {made.q} != integrand conditioning size {block.q}")
        self.made = made
        self.block = block
        perm = np.arange(made.d) if permutation is None else np.asarray(permutation, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(made.d)):
            raise ConfigurationError(f"not a permutation of 0..{made.d - 1}: {perm}")
        self.permutation = perm

    @property
    def d(self) -> int:
        return self.made.d

    def param_stores(self) -> list[ParamStore]:
        return [self.made.params, self.block.params]


class FlowModel:
    """Stack of flow steps over a standard normal base.

    ``mean`` and ``std`` are the standardization applied to raw data before
    the flow; the flow itself works in standardized coordinates.
    """

    def __init__(self, steps: list[FlowStep], mean=None, std=None):
        if not steps:
            raise ConfigurationError("a flow needs at least one step")
        d = steps[0].d
        if any(s.d != d for s in steps):
            raise DimensionError("all steps must share the data dimension")
        self.steps = steps
        self.d = d
        self.mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = np.ones(d) if std is None else np.asarray(std, dtype=np.float64)

    @property
    def q(self) -> int:
        return self.steps[0].made.q

    def param_stores(self) -> list[ParamStore]:
        return [p for s in self.steps for p in s.param_stores()]

    def zero_grad(self) -> None:
        for p in self.param_stores():
            p.zero_grad()


def build_flow(d: int, k: int = 1, embedding_hidden=(50,) * 4, integrand_hidden=(50,) * 4,
               q: int = 10, seed: int = 0, train_steps=50, eval_steps: int = EVAL_STEPS) -> FlowModel:
    """Random UMNN-MAF; every step after the first reverses its input order."""
    if k < 1:
        raise ConfigurationError(f"number of flows must be >= 1, got {k}")
    if q < 1:
        raise ConfigurationError(f"embedding size must be >= 1, got {q}")
    seeds = np.random.SeedSequence(seed).generate_state(2 * k)
    steps = []
    for s in range(k):
        made = MadeNet.create(d, embedding_hidden, q, int(seeds[2 * s]))
        block = MonotonicBlock.create(q, integrand_hidden, int(seeds[2 * s + 1]),
                                      eval_steps=eval_steps, train_steps=train_steps)
        perm = np.arange(d) if s == 0 else np.arange(d)[::-1].copy()
        steps.append(FlowStep(made, block, perm))
    return FlowModel(steps)


def identity_flow(d: int, k: int = 1, embedding_hidden=(8,), integrand_hidden=(8,), q: int = 2) -> FlowModel:
    """Flow with ``f == 1``, ``beta == 0`` and identity orderings, i.e. ``z = x``."""
    model = build_flow(d, k, embedding_hidden, integrand_hidden, q)
    for step in model.steps:
        step.permutation = np.arange(d)
        for p in step.param_stores():
            for value, _, _ in p.tensors():
                value.fill(0.0)
    return model


def _check_batch(x, d: int) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != d:
        raise DimensionError(f"expected data of shape [B x {d}], got {x.shape}")
    if not np.isfinite(x).all():
        raise NumericError("non-finite input data")
    return x


@dataclass
class _StepCache:
    xp: np.ndarray
    tape: object
    h: np.ndarray
    x_flat: np.ndarray
    z_pre: np.ndarray
    rule: object


def _step_forward(step: FlowStep, x: np.ndarray, N: int):
    B, d = x.shape
    q = step.made.q
    xp = np.ascontiguousarray(x[:, step.permutation])
    h3, beta, tape = step.made.forward(xp)
    h = np.ascontiguousarray(h3.reshape(B * d, q))
    x_flat = xp.reshape(B * d)
    rule = compute_cc_weights(N)
    F = integrate_forward(step.block.integrand, 0.0, x_flat, h, rule)
    z = F.reshape(B, d) + beta
    z_pre = step.block.integrand.pre_activation(x_flat, h)
    log_f = np.where(z_pre > 0, np.log1p(np.maximum(z_pre, 0.0)), z_pre)
    return z, log_f.reshape(B, d).sum(axis=1), _StepCache(xp, tape, h, x_flat, z_pre, rule)


def flow_forward(step: FlowStep, x, N: int | None = None):
    """Apply one step; returns ``z`` (in the step's permuted order) and ``sum_i log f``."""
    x = _check_batch(x, step.d)
    z, sum_log_f, _ = _step_forward(step, x, N or step.block.eval_steps)
    return z, sum_log_f


def standard_normal_logpdf(z: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum(z * z, axis=1) - 0.5 * z.shape[1] * LOG_2PI


def log_density(model: FlowModel, x, N: int | None = None, chunk: int = 1024) -> np.ndarray:
    """``log p(x)`` in the model's (standardized) coordinates."""
    x = _check_batch(x, model.d)
    out = np.empty(x.shape[0])
    for start in range(0, x.shape[0], chunk):
        z = x[start:start + chunk]
        total = np.zeros(z.shape[0])
        for step in model.steps:
            z, slf, _ = _step_forward(step, z, N or step.block.eval_steps)
            total += slf
        out[start:start + chunk] = standard_normal_logpdf(z) + total
    return out


def data_log_density(model: FlowModel, x, N: int | None = None) -> np.ndarray:
    """``log p(x)`` for raw data: standardize with the model's stats and add the log-Jacobian."""
    x = _check_batch(x, model.d)
    return log_density(model, (x - model.mean) / model.std, N) - float(np.sum(np.log(model.std)))


def _step_backward(step: FlowStep, cache: _StepCache, grad_z: np.ndarray, inv_batch: float):
    B, d = grad_z.shape
    q = step.made.q
    integrand = step.block.integrand
    g_flat = np.ascontiguousarray(grad_z.reshape(B * d))
    grad_x, grad_h = integrate_backward(integrand, 0.0, cache.x_flat, cache.h, g_flat, cache.rule)
    # loss carries -mean(sum_i log f); d log(ELU(z)+1) / dz = 1/(1+z) for z > 0 else 1
    zp = cache.z_pre
    g_pre = -inv_batch * np.where(zp > 0, 1.0 / (1.0 + np.maximum(zp, 0.0)), 1.0)
    gt, gh = integrand.backward_pre(cache.x_flat, cache.h, g_pre)
    grad_h += gh
    grad_xp = (grad_x + gt).reshape(B, d)
    g_out = np.empty((B, d, q + 1))
    g_out[:, :, :q] = grad_h.reshape(B, d, q)
    g_out[:, :, q] = grad_z
    grad_xp += mlp_backward(step.made.params, cache.tape, g_out.reshape(B, d * (q + 1)))
    grad_in = np.empty_like(grad_xp)
    grad_in[:, step.permutation] = grad_xp
    return grad_in


def nll_loss_and_grads(model: FlowModel, batch, N: int | None = None) -> float:
    """Mean negative log-likelihood of ``batch``; gradients are added to every ParamStore."""
    x = _check_batch(batch, model.d)
    if x.shape[0] == 0:
        raise ConfigurationError("empty batch")
    z = x
    total = np.zeros(x.shape[0])
    caches = []
    for step in model.steps:
        z, slf, cache = _step_forward(step, z, N or step.block.eval_steps)
        caches.append(cache)
        total += slf
    loss = -float(np.mean(standard_normal_logpdf(z) + total))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss; training step rejected")
    inv_batch = 1.0 / x.shape[0]
    g = z * inv_batch
    for step, cache in zip(reversed(model.steps), reversed(caches)):
        g = _step_backward(step, cache, g, inv_batch)
    return loss


def flow_inverse(model: FlowModel, z, tol: float = 1e-6, N: int | None = None) -> np.ndarray:
    """Invert the stack, last step first, one dimension at a time within a step."""
    x = _check_batch(z, model.d)
    B, d = x.shape
    for s in range(len(model.steps) - 1, -1, -1):
        step = model.steps[s]
        xp = np.zeros((B, d))
        for i in range(d):
            h3, beta, _ = step.made.forward(xp)
            try:
                xp[:, i] = umnn_invert(step.block, x[:, i], np.ascontiguousarray(h3[:, i, :]),
                                       beta[:, i], N or step.block.eval_steps, tol)
            except InversionRangeError as err:
                raise InversionRangeError(f"step {s}, dimension {i}: {err}") from err
        x = np.empty_like(xp)
        x[:, step.permutation] = xp
    return x


def model_sample(model: FlowModel, n: int, temperature: float = 1.0, seed: int = 0,
                 tol: float = 1e-6) -> np.ndarray:
    """Draw ``z ~ N(0, T I)`` and invert; results are in standardized coordinates."""
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    if n < 0:
        raise ConfigurationError(f"sample count must be >= 0, got {n}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, model.d)) * np.sqrt(temperature)
    if n == 0:
        return z
    return flow_inverse(model, z, tol)
