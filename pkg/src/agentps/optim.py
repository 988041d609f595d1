from __future__ import annotations

import math
from typing import Any

import numpy as np

from .errors import ConfigError
from .numerics import Tensor


class Adam:
    """Adaptive moment estimation with optional decoupled weight decay.

    Parameters whose ``grad`` is ``None`` after a backward pass are left
    untouched, moments included.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1**t
        correction2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None or v is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name] = m.astype(p.data.dtype)
            self.v[name] = v.astype(p.data.dtype)
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)

    def state_dict(self) -> dict[str, Any]:
        return {"step": self.step_count, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict[str, Any]) -> None:
        unknown = (set(state["m"]) | set(state["v"])) - set(self.params)
        if unknown:
            raise ConfigError(f"optimizer state names unknown parameters: {sorted(unknown)[:3]}")
        self.step_count = int(state["step"])
        self.m = {k: np.asarray(a) for k, a in state["m"].items()}
        self.v = {k: np.asarray(a) for k, a in state["v"].items()}


def learning_rate(base: float, schedule: str, step: int, total_steps: int) -> float:
    """Rate for ``step`` (0-based) of ``total_steps``."""
    if schedule == "constant" or total_steps <= 0:
        return base
    progress = min(step / total_steps, 1.0)
    if schedule == "linear":
        return base * (1.0 - progress)
    if schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * progress))
    raise ConfigError(f"unknown learning-rate schedule {schedule!r}")
