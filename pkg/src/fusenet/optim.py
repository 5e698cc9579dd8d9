"""Adam, the per-epoch exponential learning-rate decay, and early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .autograd import Tensor
from .errors import ContractError


@dataclass
class AdamState:
    shapes: list[tuple[int, int]]
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ContractError(f"Adam epsilon must be positive, got {self.epsilon}")
        if not self.m:
            self.m = [np.zeros(s) for s in self.shapes]
            self.v = [np.zeros(s) for s in self.shapes]


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
    """One bias-corrected Adam update, applied in place to every array in ``params``."""
    if not lr > 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ContractError(f"Adam state tracks {len(state.m)} parameters, got {len(params)} params / {len(grads)} grads")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractError(f"parameter {p.shape}, gradient {g.shape} and moment {m.shape} shapes differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


class Adam:
    """Adam over a fixed list of tensors, reading their ``grad`` fields."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState([p.shape for p in self.params], beta1, beta2, epsilon)

    def step(self, lr: float) -> None:
        adam_step(self.state, [p.values for p in self.params], [p.grad for p in self.params], lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def lr_schedule(base_lr: float, epoch: int, decay: float = 1.0) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be non-negative, got {epoch}")
    if not 0 < decay <= 1:
        raise ContractError(f"decay must lie in (0, 1], got {decay}")
    return base_lr * decay ** epoch


@dataclass
class EarlyStopper:
    """Tracks the best validation score; only strict improvements count."""

    patience: int = 10
    best_score: float = -np.inf
    best_epoch: int = -1
    last_epoch: int = -1

    def __post_init__(self):
        if self.patience < 1:
            raise ContractError(f"patience must be a positive integer, got {self.patience}")

    def update(self, epoch: int, score: float) -> Literal["continue", "stop"]:
        return early_stop_update(self, epoch, score)

    @property
    def improved(self) -> bool:
        """Whether the most recent update set a new best."""
        return self.best_epoch == self.last_epoch


def early_stop_update(stopper: EarlyStopper, epoch: int, score: float) -> Literal["continue", "stop"]:
    if epoch <= stopper.last_epoch:
        raise ContractError(f"epoch {epoch} presented after epoch {stopper.last_epoch}")
    stopper.last_epoch = epoch
    if score > stopper.best_score:
        stopper.best_score = score
        stopper.best_epoch = epoch
    return "stop" if epoch - stopper.best_epoch >= stopper.patience else "continue"
