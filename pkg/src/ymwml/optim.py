"""Adam with coupled L2 weight decay and the polynomial learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteError
from .model import ParameterStore


@dataclass
class PolySchedule:
    max_iter: int
    lr0: float = 0.01
    power: float = 0.9

    def validate(self) -> "PolySchedule":
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.lr0 <= 0.0 or self.power <= 0.0:
            raise ConfigError(f"lr0 and power must be > 0, got {self.lr0}, {self.power}")
        return self


def poly_lr(iteration: int, sched: PolySchedule) -> float:
    """lr0 * (1 - iter/max_iter)^power, stepped once per iteration."""
    if iteration < 0 or iteration > sched.max_iter:
        raise ConfigError(f"iteration {iteration} outside [0, {sched.max_iter}]")
    return sched.lr0 * (1.0 - iteration / sched.max_iter) ** sched.power


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(
        self,
        store: ParameterStore,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"Adam betas must lie in [0, 1), got {beta1}, {beta2}")
        if weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in store.items()}


def adam_step(store: ParameterStore, state: AdamState, lr: float):
    """One update over every parameter; zeroes the gradients afterwards.

    Weight decay is coupled (added to the gradient before the moments), so it
    passes through the adaptive scaling like any other gradient term.
    """
    if lr < 0.0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in store.items():
        if p.grad is None:
            raise ConfigError(f"missing gradient for '{name}'; run backward before adam_step")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for '{name}'")
        g = p.grad + state.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    store.zero_grads()
