"""Adam with an externally supplied (linearly decaying) learning rate."""

from __future__ import annotations

import numpy as np

from ..diffcore import Parameter


class Adam:
    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params: dict[str, Parameter] = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            if lr > 0.0:
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for name in self.params:
            self.m[name] = np.asarray(state["m"][name], dtype=np.float64).copy()
            self.v[name] = np.asarray(state["v"][name], dtype=np.float64).copy()


def linear_lr(base_lr: float, t: int, total_iters: int) -> float:
    """Linear decay from ``base_lr`` at t=0 to 0 at t=total_iters."""
    return base_lr * max(0.0, 1.0 - t / total_iters)
