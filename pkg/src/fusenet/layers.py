"""Trainable layers and the multilayer perceptron built from them.

A hidden block is always ``dense -> batch norm -> relu -> dropout``. Without
batch norm the dense layer carries the relu itself. Layers hold their own
``training`` flag; :meth:`Module.train` and :meth:`Module.eval` flip it for a
whole tree.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, IngestionError, ShapeError

MAGIC = b"FUSE1"


def init_params(shape: tuple[int, int], rng: np.random.Generator, scheme: str = "uniform_glorot") -> Tensor:
    """Weight matrix drawn uniformly from ``+-sqrt(6 / (fan_in + fan_out))``."""
    rows, cols = shape
    if rows <= 0 or cols <= 0:
        raise ContractError(f"parameter shape must be positive, got {shape}")
    if scheme != "uniform_glorot":
        raise ContractError(f"unknown init scheme {scheme!r}")
    bound = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zero_params(shape: tuple[int, int]) -> Tensor:
    rows, cols = shape
    if rows <= 0 or cols <= 0:
        raise ContractError(f"parameter shape must be positive, got {shape}")
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Minimal container protocol: named parameters, buffers and children."""

    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(())

    def own_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self.own_parameters():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self.own_buffers():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, as 2-D arrays."""
        state = {name: p.values.copy() for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state[name] = b.reshape(1, -1).copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ContractError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: stored shape {state[name].shape} != {p.shape}")
            p.values[...] = state[name]
        for name, b in buffers.items():
            if state[name].size != b.size:
                raise ShapeError(f"{name}: stored size {state[name].size} != {b.size}")
            b[...] = state[name].reshape(b.shape)


class DenseLayer(Module):
    def __init__(self, in_width: int, out_width: int, rng: np.random.Generator,
                 activation: str = "none", bias: bool = True):
        if activation not in ("relu", "none"):
            raise ContractError(f"unknown activation {activation!r}")
        self.in_width, self.out_width = in_width, out_width
        self.W = init_params((in_width, out_width), rng)
        self.b = zero_params((1, out_width)) if bias else None
        self.activation = activation

    def own_parameters(self):
        yield "W", self.W
        if self.b is not None:
            yield "b", self.b

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    if x.shape[1] != layer.in_width:
        raise ShapeError(f"dense layer expects {layer.in_width} input columns, got input {x.shape}")
    out = ag.matmul(x, layer.W)
    if layer.b is not None:
        out = ag.add_bias(out, layer.b)
    if layer.activation == "relu":
        out = ag.relu(out)
    return out


class BatchNormLayer(Module):
    """Per-column batch normalization.

    ``running = momentum * running + (1 - momentum) * batch_stat``; the
    variance used both for normalizing and for the running estimate is the
    biased batch variance.
    """

    def __init__(self, width: int, momentum: float = 0.9, epsilon: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ContractError(f"batch norm momentum must lie in (0, 1), got {momentum}")
        if not epsilon > 0:
            raise ContractError(f"batch norm epsilon must be positive, got {epsilon}")
        self.gamma = Tensor(np.ones((1, width)), requires_grad=True)
        self.beta = Tensor(np.zeros((1, width)), requires_grad=True)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.epsilon = epsilon

    def own_parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def own_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm_forward(self, x)


def batchnorm_forward(layer: BatchNormLayer, x: Tensor) -> Tensor:
    if not layer.training:
        return ag.batch_norm_eval(x, layer.gamma, layer.beta, layer.running_mean,
                                  layer.running_var, layer.epsilon)
    out, mu, var = ag.batch_norm_train(x, layer.gamma, layer.beta, layer.epsilon)
    m = layer.momentum
    layer.running_mean[...] = m * layer.running_mean + (1.0 - m) * mu
    layer.running_var[...] = m * layer.running_var + (1.0 - m) * var
    return out


class DropoutLayer(Module):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return dropout_forward(self, x)


def dropout_forward(layer: DropoutLayer, x: Tensor) -> Tensor:
    if not layer.training or layer.rate == 0.0:
        return x
    keep = layer.rng.random(x.shape) >= layer.rate
    return ag.mul(x, Tensor(keep / (1.0 - layer.rate)))


class Block(Module):
    """``dense -> [batch norm] -> relu -> dropout``."""

    def __init__(self, in_width: int, out_width: int, rng: np.random.Generator,
                 dropout_rng: np.random.Generator, batch_norm: bool = True, dropout: float = 0.0,
                 bn_momentum: float = 0.9, bn_epsilon: float = 1e-5):
        self.dense = DenseLayer(in_width, out_width, rng, activation="none" if batch_norm else "relu")
        self.bn = BatchNormLayer(out_width, bn_momentum, bn_epsilon) if batch_norm else None
        self.dropout = DropoutLayer(dropout, dropout_rng)

    def children(self):
        yield "dense", self.dense
        if self.bn is not None:
            yield "bn", self.bn
        yield "dropout", self.dropout

    def __call__(self, x: Tensor) -> Tensor:
        h = self.dense(x)
        if self.bn is not None:
            h = ag.relu(self.bn(h))
        return self.dropout(h)


class MLP(Module):
    """Hidden blocks followed by a linear output head.

    Args:
        in_width: input columns.
        hidden: widths of the hidden blocks, in order.
        out_width: head width (class count); ``None`` builds no head.
        rng: generator for weight initialization.
        dropout_rng: generator for dropout masks.
    """

    def __init__(self, in_width: int, hidden: Sequence[int], out_width: int | None,
                 rng: np.random.Generator, dropout_rng: np.random.Generator | None = None,
                 batch_norm: bool = True, dropout: float = 0.0,
                 bn_momentum: float = 0.9, bn_epsilon: float = 1e-5):
        dropout_rng = dropout_rng if dropout_rng is not None else rng
        widths = [in_width, *hidden]
        self.blocks = [
            Block(a, b, rng, dropout_rng, batch_norm, dropout, bn_momentum, bn_epsilon)
            for a, b in zip(widths[:-1], widths[1:])
        ]
        self.head = DenseLayer(widths[-1], out_width, rng) if out_width is not None else None
        self.in_width = in_width

    def children(self):
        for i, block in enumerate(self.blocks):
            yield f"block{i}", block
        if self.head is not None:
            yield "head", self.head

    def forward_hidden(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Return ``(logits, [h_1, ..., h_m])``."""
        hidden = []
        h = x
        for block in self.blocks:
            h = block(h)
            hidden.append(h)
        return self.head(h), hidden

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for block in self.blocks:
            h = block(h)
        return self.head(h) if self.head is not None else h


# ---------------------------------------------------------------------------
# binary parameter container
# ---------------------------------------------------------------------------


def write_params(state: dict[str, np.ndarray], fh: BinaryIO) -> None:
    """Write ``MAGIC``, a record count, then ``(name, rows, cols, float64 LE data)`` records."""
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            arr = arr.reshape(1, -1)
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise IngestionError(f"parameter file truncated: wanted {n} bytes, got {len(data)}")
    return data


def read_params(fh: BinaryIO) -> dict[str, np.ndarray]:
    if _read_exact(fh, len(MAGIC)) != MAGIC:
        raise IngestionError("not a FUSE1 parameter file")
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, name_len).decode("utf-8")
        rows, cols = struct.unpack("<II", _read_exact(fh, 8))
        raw = _read_exact(fh, 8 * rows * cols)
        state[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)
    return state


def save_params(module: Module, path) -> None:
    with open(path, "wb") as fh:
        write_params(module.state_dict(), fh)


def load_params(module: Module, path) -> None:
    with open(path, "rb") as fh:
        module.load_state_dict(read_params(fh))
