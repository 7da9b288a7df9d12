"""Adaptive-moment optimizer with decoupled weight decay, and a cosine schedule."""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError, NonFiniteError


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to zero at ``total_steps``."""
    if total_steps <= 0:
        raise ConfigurationError("schedule needs a positive step count")
    t = min(max(step, 0), total_steps) / total_steps
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Bias-corrected Adam; weight decay is applied to the weights directly.

    Moments are keyed by parameter name so they can be checkpointed.
    """

    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = {n: p for n, p in named_params if p.requires_grad}
        if not self.params:
            raise ConfigurationError("optimizer received no trainable parameters")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for n, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {n}")
            m, v = self.m[n], self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1.0 - lr * self.weight_decay) - lr * update).astype(p.dtype, copy=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            out[f"optim.m.{n}"] = self.m[n]
            out[f"optim.v.{n}"] = self.v[n]
        out["optim.step"] = np.array([self.step_count])
        return out

    def load_state_dict(self, state: dict) -> None:
        for n in self.params:
            self.m[n] = np.asarray(state[f"optim.m.{n}"], dtype=self.m[n].dtype).reshape(self.m[n].shape).copy()
            self.v[n] = np.asarray(state[f"optim.v.{n}"], dtype=self.v[n].dtype).reshape(self.v[n].shape).copy()
        self.step_count = int(np.asarray(state["optim.step"]).ravel()[0])
