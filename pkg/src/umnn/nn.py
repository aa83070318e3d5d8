"""Dense and masked feed-forward networks with hand-written backprop and Adam.

Everything runs in float64. Hidden layers use ReLU or squareplus; the output
layer is either linear or ``ELU(z) + 1``, which is strictly positive for every
finite pre-activation.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError, UMNNError


class Output(enum.Enum):
    LINEAR = "linear"
    ELU_PLUS_ONE = "elu_plus_one"


class Hidden(enum.Enum):
    RELU = "relu"
    SQUAREPLUS = "squareplus"


def squareplus(z: np.ndarray) -> np.ndarray:
    """``(z + sqrt(z^2 + 4)) / 2``: smooth, positive, ReLU-like, no transcendentals."""
    return 0.5 * (z + np.sqrt(z * z + 4.0))


def squareplus_grad_from_output(a: np.ndarray) -> np.ndarray:
    """Derivative of squareplus expressed through its value ``a``: ``a^2 / (a^2 + 1)``."""
    a2 = a * a
    return a2 / (a2 + 1.0)


def elu_plus_one(z: np.ndarray) -> np.ndarray:
    # exp of the clipped value never overflows
    return np.where(z > 0, z + 1.0, np.exp(np.minimum(z, 0.0)))


def elu_plus_one_grad(z: np.ndarray) -> np.ndarray:
    return np.exp(np.minimum(z, 0.0))


def log_elu_plus_one(z: np.ndarray) -> np.ndarray:
    """``log(ELU(z) + 1)`` evaluated without forming the exponential."""
    return np.where(z > 0, np.log1p(np.maximum(z, 0.0)), z)


class ParamStore:
    """Weights, biases, optional binary masks and gradient slots of an MLP.

    ``weights[l]`` has shape ``(out, in)``; ``grad_*`` mirror the parameter
    shapes and are accumulated into by backward passes.
    """

    def __init__(self, weights, biases, masks=None):
        if len(weights) != len(biases) or not weights:
            raise ConfigurationError("need one bias per weight matrix and at least one layer")
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        if masks is None:
            masks = [None] * len(self.weights)
        if len(masks) != len(self.weights):
            raise ConfigurationError("need one mask slot per layer")
        self.masks = [None if m is None else np.asarray(m, dtype=np.float64) for m in masks]
        for l, (w, b, m) in enumerate(zip(self.weights, self.biases, self.masks)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {l}: weight {w.shape} incompatible with bias {b.shape}")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise DimensionError(f"layer {l} fan-in {w.shape[1]} != previous fan-out")
            if m is not None and m.shape != w.shape:
                raise DimensionError(f"layer {l}: mask {m.shape} does not match weight {w.shape}")
        self.grad_weights = [np.zeros_like(w) for w in self.weights]
        self.grad_biases = [np.zeros_like(b) for b in self.biases]
        self.apply_masks()

    @property
    def layers(self):
        return list(zip(self.weights, self.biases))

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    def tensors(self):
        """Yield ``(value, grad, mask)`` for every tensor in declaration order."""
        for w, b, gw, gb, m in zip(self.weights, self.biases, self.grad_weights,
                                   self.grad_biases, self.masks):
            yield w, gw, m
            yield b, gb, None

    def n_params(self) -> int:
        return sum(p.size for p, _, _ in self.tensors())

    def zero_grad(self) -> None:
        for _, g, _ in self.tensors():
            g.fill(0.0)

    def apply_masks(self) -> None:
        for w, m in zip(self.weights, self.masks):
            if m is not None:
                w *= m

    def copy(self) -> "ParamStore":
        return ParamStore([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                          [None if m is None else m.copy() for m in self.masks])

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p, _, _ in self.tensors())


def init_mlp(layer_sizes, seed: int, masks=None) -> ParamStore:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    layer_sizes = list(layer_sizes)
    if len(layer_sizes) < 2 or any(int(s) != s or s < 1 for s in layer_sizes):
        raise ConfigurationError(f"layer_sizes must be >= 2 positive integers, got {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ParamStore(weights, biases, masks)


@dataclass
class Tape:
    """Layer inputs and the output pre-activation of one forward call."""
    inputs: list = field(default_factory=list)
    out_pre: np.ndarray | None = None
    pre: list = field(default_factory=list)
    output: Output = Output.LINEAR
    hidden: Hidden = Hidden.RELU
    n_layers: int = 0


def mlp_forward(params: ParamStore, x: np.ndarray, activation: Output = Output.LINEAR,
                hidden: Hidden = Hidden.RELU):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.n_in:
        raise DimensionError(f"input shape {x.shape} does not match fan-in {params.n_in}")
    tape = Tape(output=Output(activation), hidden=Hidden(hidden), n_layers=len(params.weights))
    act = np.maximum if tape.hidden is Hidden.RELU else (lambda z, _: squareplus(z))
    a = x
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(params.layers):
        tape.inputs.append(a)
        z = a @ w.T + b
        tape.pre.append(z)
        a = act(z, 0.0) if l < last else z
    tape.out_pre = a
    if tape.output is Output.ELU_PLUS_ONE:
        return elu_plus_one(a), tape
    return a, tape


def mlp_backward(params: ParamStore, tape: Tape, grad_output: np.ndarray) -> np.ndarray:
    """Backpropagate ``grad_output``; parameter gradients are added, not assigned."""
    if tape.n_layers != len(params.weights) or tape.out_pre is None:
        raise UMNNError("tape was not produced by a forward pass of these parameters")
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != tape.out_pre.shape:
        raise DimensionError(f"grad_output {g.shape} != output {tape.out_pre.shape}")
    if tape.output is Output.ELU_PLUS_ONE:
        g = g * elu_plus_one_grad(tape.out_pre)
    for l in range(len(params.weights) - 1, -1, -1):
        a_prev = tape.inputs[l]
        gw = g.T @ a_prev
        if params.masks[l] is not None:
            gw *= params.masks[l]
        params.grad_weights[l] += gw
        params.grad_biases[l] += g.sum(axis=0)
        g = g @ params.weights[l]
        if l > 0:
            if tape.hidden is Hidden.RELU:
                g = g * (tape.pre[l - 1] > 0)
            else:
                g = g * squareplus_grad_from_output(a_prev)
    return g


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: ParamStore, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        if state.lr <= 0 or state.weight_decay < 0:
            raise ConfigurationError("Adam needs lr > 0 and weight_decay >= 0")
        state.m = [np.zeros_like(p) for p, _, _ in params.tensors()]
        state.v = [np.zeros_like(p) for p, _, _ in params.tensors()]
        return state


def adam_step(params: ParamStore, state: AdamState) -> None:
    """Adam with decoupled weight decay; zeroes grads and re-applies masks.

    Raises :class:`NumericError` without touching anything if a gradient is
    not finite.
    """
    tensors = list(params.tensors())
    if len(tensors) != len(state.m):
        raise DimensionError("Adam state does not match the parameter store")
    for i, (_, g, _) in enumerate(tensors):
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in tensor {i}; step rejected")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for (p, g, _), m, v in zip(tensors, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    params.zero_grad()
    params.apply_masks()
