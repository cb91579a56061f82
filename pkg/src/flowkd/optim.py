"""Adam and plain SGD over a named parameter registry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer '{self.kind}'")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")


class Adam:
    """Adam with bias-corrected first and second moments."""

    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig | None = None):
        self.params = params
        self.cfg = cfg or OptimizerConfig()
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        _require_grads(self.params)
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p.data = p.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


class SGD:
    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig | None = None):
        self.params = params
        self.cfg = cfg or OptimizerConfig(kind="sgd")
        self.t = 0

    def step(self) -> None:
        _require_grads(self.params)
        self.t += 1
        for p in self.params.values():
            if p.grad is not None:
                p.data = p.data - self.cfg.learning_rate * p.grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def _require_grads(params: dict[str, Tensor]) -> None:
    if not params or all(p.grad is None for p in params.values()):
        raise RuntimeError("optimizer step called without any populated gradients")


def make_optimizer(params: dict[str, Tensor], cfg: OptimizerConfig):
    return Adam(params, cfg) if cfg.kind == "adam" else SGD(params, cfg)


def adam_step(cfg: OptimizerConfig, params: dict[str, Tensor], state: Adam | None = None) -> Adam:
    """One Adam update of ``params``; pass the returned state back in to continue."""
    state = state if state is not None else Adam(params, cfg)
    state.step()
    return state
