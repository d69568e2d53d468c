"""SGD with momentum and the two learning-rate policies.

The plateau policy follows the stage-training rule: multiply the rate by
``factor`` whenever the monitored metric has not improved for ``patience``
epochs, and end the phase once the rate falls below ``min_lr``. The
milestone policy decays at fixed epochs and never ends a phase early.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RunAbort, UsageError


class SGDState:
    """Velocity buffers for one phase; created fresh at every phase start."""

    def __init__(self, params, lr, momentum=0.9):
        if lr <= 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocities = {
            p.name: np.zeros_like(p.value.data) for p in params if p.trainable
        }


def sgd_step(state, params):
    """v <- momentum*v + grad; value <- value - lr*v; grads cleared.

    Frozen parameters are never touched, even with a stale gradient
    attached.
    """
    for p in params:
        if not p.trainable:
            continue
        if p.grad is None:
            raise UsageError(f"trainable parameter {p.name} has no gradient")
        v = state.velocities[p.name]
        v *= state.momentum
        v += p.grad
        p.value.data -= np.asarray(state.lr * v, dtype=p.value.data.dtype)
        p.clear_grad()


@dataclass(frozen=True)
class PlateauPolicy:
    initial_lr: float = 0.01
    factor: float = 0.1
    patience: int = 3
    min_lr: float = 1e-5
    monitored: str = "loss"

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ConfigError(f"plateau factor must be in (0,1), got {self.factor}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.min_lr <= 0 or self.initial_lr <= 0:
            raise ConfigError("learning rates must be positive")

    def start(self):
        return PlateauState(policy=self, lr=self.initial_lr)


@dataclass
class PlateauState:
    policy: PlateauPolicy
    lr: float
    best: float = math.inf
    stale_epochs: int = 0


def plateau_update(state, metric):
    """Feed one epoch's monitored metric; returns (new_lr, phase_end).

    The learning-rate sequence is non-increasing; the phase ends when a
    decay would push the rate below ``min_lr``.
    """
    metric = float(metric)
    if not math.isfinite(metric):
        raise RunAbort(f"non-finite plateau metric {metric}")
    if metric < state.best:
        state.best = metric
        state.stale_epochs = 0
        return state.lr, False
    state.stale_epochs += 1
    if state.stale_epochs < state.policy.patience:
        return state.lr, False
    state.stale_epochs = 0
    state.lr *= state.policy.factor
    if state.lr < state.policy.min_lr:
        return state.lr, True
    return state.lr, False


@dataclass(frozen=True)
class MilestonePolicy:
    total_epochs: int
    milestones: tuple
    factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.milestones and (self.milestones[0] < 1 or self.milestones[-1] >= self.total_epochs):
            raise ConfigError(
                f"milestones {self.milestones} must lie in [1, {self.total_epochs})"
            )

    @classmethod
    def for_budget(cls, total_epochs, fractions=(0.3, 0.6, 0.9), factor=0.1):
        """Milestones at fixed fractions of the budget (deduplicated)."""
        marks = sorted({int(total_epochs * f) for f in fractions})
        marks = [m for m in marks if 1 <= m < total_epochs]
        return cls(total_epochs=total_epochs, milestones=tuple(marks), factor=factor)

    def lr_at(self, initial_lr, epoch):
        decays = sum(1 for m in self.milestones if epoch >= m)
        return initial_lr * self.factor**decays
