"""Dense 2-D tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When at least one input
requires a gradient, the output carries a :class:`Node` recording the
operation, its inputs and a backward closure. Node ids come from a global
counter, so sorting the nodes reachable from a loss by id reproduces the
order in which they were built. :func:`backward` walks them in exactly the
reverse of that order.

Broadcasting is deliberately absent. The only mixed-shape operations are
:func:`add_bias` (a ``1 x cols`` row added to every row) and :func:`scale`
by a ``1 x 1`` tensor; both are explicit.

All values are float64.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_node_ids = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _as_2d(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got an array with shape {arr.shape}")
    return arr


@dataclass(eq=False)
class Node:
    """One recorded operation: ``output = op(*inputs)``."""

    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward_fn: BackwardFn
    id: int = field(default_factory=lambda: next(_node_ids))


class Tensor:
    """A 2-D float64 array with an accumulated gradient.

    Args:
        values: anything ``np.array`` accepts; scalars become ``1 x 1`` and
            vectors become a single row.
        requires_grad: whether :func:`backward` should accumulate into
            ``grad`` for this tensor.
        name: optional label, used by parameter serialization.
    """

    __slots__ = ("values", "grad", "requires_grad", "name", "_node")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = _as_2d(values)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = requires_grad
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def node(self) -> Node | None:
        return self._node

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; scalars route through scale/shift
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.shape == self.shape:
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(values: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = np.zeros_like(values)
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._node = Node(op, inputs, out, backward_fn) if out.requires_grad else None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _make(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.values + b.values, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.values - b.values, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _make(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` a ``1 x cols`` row repeated over the rows of ``x``."""
    if b.shape != (1, x.shape[1]):
        raise ShapeError(f"add_bias: bias {b.shape} does not fit input {x.shape}")
    return _make(x.values + b.values, "add_bias", (x, b), lambda g: (g, g.sum(axis=0, keepdims=True)))


def scale(x: Tensor, s: "Tensor | float") -> Tensor:
    """Multiply every entry by a scalar.

    ``s`` is either a Python number (a constant) or a ``1 x 1`` tensor, in
    which case it receives ``sum(grad * x)``. This is how the fusion weights
    enter the graph.
    """
    if not isinstance(s, Tensor):
        c = float(s)
        return _make(x.values * c, "scale", (x,), lambda g: (g * c,))
    if s.shape != (1, 1):
        raise ShapeError(f"scale: factor must be 1x1, got {s.shape}")
    xv, sv = x.values, s.values[0, 0]
    return _make(xv * sv, "scale", (x, s), lambda g: (g * sv, np.array([[np.sum(g * xv)]])))


def shift(x: Tensor, c: float) -> Tensor:
    return _make(x.values + c, "shift", (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    # gradient at exactly 0 is 0
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0.0), "relu", (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.values)
    return _make(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.values)
    return _make(t, "tanh", (x,), lambda g: (g * (1.0 - t * t),))


def log(x: Tensor) -> Tensor:
    xv = x.values
    return _make(np.log(xv), "log", (x,), lambda g: (g / xv,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; the gradient is zero where clamping happened."""
    inside = (x.values >= lo) & (x.values <= hi)
    return _make(np.clip(x.values, lo, hi), "clip", (x,), lambda g: (g * inside,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(np.array([[np.sum(x.values)]]), "sum", (x,), lambda g: (np.full(shape, g[0, 0]),))


def mean(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.values.size
    return _make(np.array([[np.sum(x.values) / n]]), "mean", (x,), lambda g: (np.full(shape, g[0, 0] / n),))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along columns; all inputs must share a row count."""
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.shape[0] != rows:
            raise ShapeError(f"concat: row counts differ ({tensors[0].shape} vs {t.shape})")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward_fn(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.values for t in tensors], axis=1), "concat", tuple(tensors), backward_fn)


def softmax_cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean over rows of ``-sum(targets * log_softmax(logits))``.

    ``targets`` is treated as a constant (one-hot rows in practice).
    """
    _same_shape("softmax_cross_entropy", logits, targets)
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - logsum
    y = targets.values
    n = z.shape[0]
    loss = -np.sum(y * log_p) / n

    def backward_fn(g):
        p = np.exp(log_p)
        return (g[0, 0] * (p * y.sum(axis=1, keepdims=True) - y) / n, None)

    return _make(np.array([[loss]]), "softmax_cross_entropy", (logits, targets), backward_fn)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize each column by the batch mean and (biased) variance.

    Returns the output tensor together with the batch mean and variance so the
    caller can update running statistics.
    """
    n, d = x.shape
    if n < 2:
        raise ContractError("batch normalization in train mode needs a batch of at least 2 rows")
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ShapeError(f"batch_norm: gamma {gamma.shape} / beta {beta.shape} do not fit input {x.shape}")
    mu = x.values.mean(axis=0, keepdims=True)
    var = x.values.var(axis=0, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.values - mu) * inv_std
    gv = gamma.values

    def backward_fn(g):
        dx_hat = g * gv
        dx = inv_std * (dx_hat - dx_hat.mean(axis=0, keepdims=True)
                        - x_hat * (dx_hat * x_hat).mean(axis=0, keepdims=True))
        return dx, (g * x_hat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    out = _make(x_hat * gv + beta.values, "batch_norm", (x, gamma, beta), backward_fn)
    return out, mu.ravel(), var.ravel()


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                    running_var: np.ndarray, eps: float) -> Tensor:
    d = x.shape[1]
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ShapeError(f"batch_norm: gamma {gamma.shape} / beta {beta.shape} do not fit input {x.shape}")
    inv_std = 1.0 / np.sqrt(running_var.reshape(1, -1) + eps)
    x_hat = (x.values - running_mean.reshape(1, -1)) * inv_std
    gv = gamma.values

    def backward_fn(g):
        return g * gv * inv_std, (g * x_hat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _make(x_hat * gv + beta.values, "batch_norm_eval", (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------------------
# graph and backward pass
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """The operations reachable from an output, in construction order."""

    nodes: list[Node]

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [output]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node.id in seen:
                continue
            seen.add(node.id)
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda nd: nd.id)
        return cls(nodes)

    def check_order(self) -> None:
        position = {nd.output: i for i, nd in enumerate(self.nodes)}
        for i, nd in enumerate(self.nodes):
            for inp in nd.inputs:
                if inp in position and position[inp] >= i:
                    raise ContractError(f"node {nd.op}#{nd.id} precedes one of its inputs")


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every tensor that requires it.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    Returns the graph that was traversed.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    for nd in graph.nodes:
        nd.output.grad = np.zeros_like(nd.output.values)
    loss.grad = np.ones((1, 1))
    for nd in reversed(graph.nodes):
        grads = nd.backward_fn(nd.output.grad)
        for inp, g in zip(nd.inputs, grads):
            if g is not None and inp.requires_grad:
                inp.grad = inp.grad + g
    return graph


def grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> float:
    """Largest relative error between backprop and central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call and be deterministic (no dropout, batch norm in eval mode).
    The error for one entry is ``|a - n| / max(1e-8, |a| + |n|)``.

    Note that relu has gradient 0 at exactly 0; a perturbation straddling a
    kink shows up as a large error for that entry.
    """
    if not step > 0:
        raise ContractError(f"grad_check step must be positive, got {step}")
    params = list(params)
    first = loss_fn().item()
    if loss_fn().item() != first:
        raise ContractError("loss function is not deterministic; disable dropout and use batch norm eval mode")
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        for idx in np.ndindex(*p.shape):
            orig = p.values[idx]
            p.values[idx] = orig + step
            up = loss_fn().item()
            p.values[idx] = orig - step
            down = loss_fn().item()
            p.values[idx] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(a[idx] - numeric) / max(1e-8, abs(a[idx]) + abs(numeric))
            worst = max(worst, err)
    return worst
