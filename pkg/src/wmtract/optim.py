"""Adam / Nadam updates and the reduce-on-plateau learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError


@dataclass
class OptimizerState:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


class Adam:
    """Bias-corrected Adam. ``step`` updates the parameter arrays in place."""

    nesterov = False

    def __init__(self, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = OptimizerState(lr, beta1, beta2, eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        st = self.state
        st.t += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1**st.t
        c2 = 1.0 - b2**st.t
        for name, p in params.items():
            g = grads[name].astype(np.float64)
            m = st.m.setdefault(name, np.zeros(p.shape))
            v = st.v.setdefault(name, np.zeros(p.shape))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / c1
            if self.nesterov:
                mhat = b1 * mhat + (1 - b1) * g / c1
            p -= (st.lr * mhat / (np.sqrt(v / c2) + st.eps)).astype(p.dtype)


class Nadam(Adam):
    """Adam with the Nesterov-corrected numerator b1*m_hat + (1-b1)*g/(1-b1^t)."""

    nesterov = True


def make_optimizer(name: str, **kw) -> Adam:
    if name == "adam":
        return Adam(**kw)
    if name == "nadam":
        return Nadam(**kw)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs
    without the monitored loss improving by more than ``min_delta``."""

    lr: float = 0.1
    patience: int = 10
    factor: float = 0.5
    min_delta: float = 1e-4
    best: float = math.inf
    since_best: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError(f"factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")

    def update(self, val_loss: float) -> float:
        if math.isnan(val_loss):
            raise NumericError("validation loss is NaN")
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.since_best = 0
        else:
            self.since_best += 1
            if self.since_best >= self.patience:
                self.lr *= self.factor
                self.since_best = 0
        return self.lr


def plateau_update(s: PlateauSchedule, val_loss: float) -> float:
    return s.update(val_loss)
