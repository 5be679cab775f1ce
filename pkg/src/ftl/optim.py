"""Adam with bias correction, plus a step-decay learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """Update ``params`` in place and advance ``state`` by one step."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise DimensionError(f"state tracks {len(state.first_moment)} params, got {len(params)}")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


class Adam:
    """Adam over a fixed list of Tensors, reading their ``.grad``."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    @property
    def lr(self) -> float:
        return self.state.learning_rate

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.learning_rate = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state)


def step_decay(base_lr: float, iteration: int, milestones, factor: float = 0.1) -> float:
    """Learning rate after dividing by 1/factor at each milestone already passed."""
    passed = sum(1 for m in milestones if iteration >= m)
    return base_lr * factor**passed
