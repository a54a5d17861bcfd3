"""SGD with momentum and coupled weight decay; step learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamVector


@dataclass
class SgdState:
    velocity: ParamVector
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")

    @classmethod
    def fresh(cls, theta: ParamVector, momentum: float = 0.9, weight_decay: float = 0.0) -> "SgdState":
        return cls(ParamVector.zeros(theta.layout), momentum, weight_decay)


def sgd_step(state: SgdState, theta: ParamVector, grad: ParamVector, lr: float) -> tuple[ParamVector, SgdState]:
    """v' = mu v + (grad + wd theta);  theta' = theta - lr v'."""
    theta.check_layout(grad)
    theta.check_layout(state.velocity)
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    step = grad.data + state.weight_decay * theta.data if state.weight_decay else grad.data
    velocity = state.momentum * state.velocity.data + step
    new_theta = theta.with_data(theta.data - lr * velocity)
    return new_theta, SgdState(theta.with_data(velocity), state.momentum, state.weight_decay)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if not self.base_lr > 0:
            raise ValueError("base learning rate must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("decay factor must lie in (0, 1]")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Milestones are inclusive: the decay is in effect at the milestone epoch."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    passed = int(np.searchsorted(schedule.milestones, epoch, side="right"))
    return schedule.base_lr * schedule.gamma**passed
