"""Optimizers with per-group learning rates, and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor

# relative slack so that clipping an already-clipped set is a bitwise no-op
_CLIP_SLACK = 1e-12


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients by ``max_norm / norm`` when the global L2 norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm > max_norm * (1.0 + _CLIP_SLACK):
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return dict(grads)


@dataclass
class OptimConfig:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Optimizer:
    """Base class: owns named parameters and a name -> learning-rate rule."""

    def __init__(self, params: Mapping[str, Tensor], lr: float | Callable[[str], float]):
        self.params = dict(params)
        self._lr = lr if callable(lr) else (lambda _name, _v=float(lr): _v)
        self.steps = 0

    def lr_for(self, name: str) -> float:
        return self._lr(name)

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        raise NotImplementedError

    def state_meta(self) -> dict:
        return {"kind": type(self).__name__.lower(), "steps": self.steps}


class SGD(Optimizer):
    def step(self, grads):
        self.steps += 1
        for name, g in grads.items():
            lr = self.lr_for(name)
            if lr:
                p = self.params[name]
                p.data = p.data - lr * g


class Adam(Optimizer):
    def __init__(self, params, lr, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads):
        self.steps += 1
        t = self.steps
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, g in grads.items():
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            lr = self.lr_for(name)
            if lr:
                p = self.params[name]
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_meta(self):
        return {**super().state_meta(), "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def make_optimizer(params, lr, config: OptimConfig | None = None) -> Optimizer:
    config = config or OptimConfig()
    if config.kind == "adam":
        return Adam(params, lr, config.beta1, config.beta2, config.eps)
    if config.kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {config.kind!r}")
