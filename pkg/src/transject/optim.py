"""Adam with bias correction, and patience-based early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, param: str | None = None):
        super().__init__(msg)
        self.param = param


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float = 5e-4,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9) -> None:
    """One Adam update of every parameter from its accumulated ``.grad``."""
    for name, p in params.items():
        if p.grad is None or not np.isfinite(p.grad).all():
            raise TrainingDiverged(f"non-finite gradient in parameter {name!r}", name)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.assign_(p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps))


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 5e-4, betas=(0.9, 0.98),
                 eps: float = 1e-9):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, self.betas[0], self.betas[1], self.eps)


@dataclass
class EarlyStopping:
    """Stop once the monitored loss fails to improve for ``patience`` epochs in a row."""

    patience: int = 4
    best: float = float("inf")
    best_epoch: int = -1
    bad_epochs: int = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record an epoch; returns True when it is the new best."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience
