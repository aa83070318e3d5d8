"""Binary model files.

Layout (all integers unsigned little-endian)::

    b"UMNN"  u16 version
    u32 d  u32 k  u32 q  u32 eval_steps
    per step:  d x u32 permutation
               u32 n_sizes, n_sizes x u32   embedding layer sizes
               u32 n_sizes, n_sizes x u32   integrand layer sizes
    d x f64 mean, d x f64 std               standardization of the raw data
    every parameter tensor as f64, step by step, embedding before integrand,
    weight before bias per layer
    u32 CRC-32 of everything above

MADE masks are not stored; they are rebuilt from the layer sizes.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import ModelFormatError
from .flow import FlowModel, FlowStep, MadeNet, build_made_masks
from .monotonic import MonotonicBlock
from .nn import ParamStore

MAGIC = b"UMNN"
VERSION = 1


def _u32s(values) -> bytes:
    values = [int(v) for v in values]
    return struct.pack(f"<{len(values)}I", *values)


def model_to_bytes(model: FlowModel) -> bytes:
    d, q = model.d, model.q
    parts = [MAGIC, struct.pack("<H", VERSION),
             _u32s([d, len(model.steps), q, model.steps[0].block.eval_steps])]
    for step in model.steps:
        parts.append(_u32s(step.permutation))
        for store in (step.made.params, step.block.params):
            parts.append(_u32s([len(store.sizes), *store.sizes]))
    parts.append(np.asarray(model.mean, dtype="<f8").tobytes())
    parts.append(np.asarray(model.std, dtype="<f8").tobytes())
    for store in model.param_stores():
        for value, _, _ in store.tensors():
            parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError("model file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32s(self, n: int) -> list[int]:
        return list(struct.unpack(f"<{n}I", self.take(4 * n)))

    def f64s(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def _params(reader: _Reader, sizes, masks=None) -> ParamStore:
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(reader.f64s((fan_out, fan_in)))
        biases.append(reader.f64s((fan_out,)))
    return ParamStore(weights, biases, masks)


def model_from_bytes(data: bytes) -> FlowModel:
    if len(data) < 4 + 2 + 16 + 4:
        raise ModelFormatError("model file is truncated")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if data[:4] != MAGIC:
        raise ModelFormatError("not a UMNN model file (bad magic)")
    (version,) = struct.unpack("<H", data[4:6])
    if version != VERSION:
        raise ModelFormatError(f"unsupported model format version {version} (expected {VERSION})")
    if zlib.crc32(payload) != crc:
        raise ModelFormatError("checksum mismatch; model file is corrupted")
    reader = _Reader(payload)
    reader.pos = 6
    d, k, q, eval_steps = reader.u32s(4)
    if d < 1 or k < 1 or q < 1 or eval_steps < 2:
        raise ModelFormatError(f"invalid header d={d} k={k} q={q} eval_steps={eval_steps}")
    layouts = []
    for _ in range(k):
        perm = reader.u32s(d)
        nets = []
        for _ in range(2):
            (n_sizes,) = reader.u32s(1)
            nets.append(reader.u32s(n_sizes))
        layouts.append((perm, *nets))
    mean = reader.f64s((d,))
    std = reader.f64s((d,))
    steps = []
    try:
        for perm, made_sizes, int_sizes in layouts:
            masks = build_made_masks(d, made_sizes[1:-1], q)
            made = MadeNet(_params(reader, made_sizes, masks), d, q)
            block = MonotonicBlock(_params(reader, int_sizes), eval_steps=eval_steps)
            steps.append(FlowStep(made, block, perm))
    except ModelFormatError:
        raise
    except ValueError as err:
        raise ModelFormatError(f"inconsistent model layout: {err}") from err
    if reader.pos != len(payload):
        raise ModelFormatError(f"{len(payload) - reader.pos} unexpected trailing bytes")
    return FlowModel(steps, mean, std)


def save_model(model: FlowModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> FlowModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
