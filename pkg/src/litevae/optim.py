"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Parameter


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.5, beta2: float = 0.9, eps: float = 1e-8) -> None:
    """One in-place Adam update of ``params``; entries with a ``None`` gradient are skipped."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, named_params, lr: float = 1e-4, betas: tuple[float, float] = (0.5, 0.9), eps: float = 1e-8):
        self.params: dict[str, Parameter] = dict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        data = {n: p.data for n, p in self.params.items()}
        grads = {n: p.grad for n, p in self.params.items()}
        adam_step(data, grads, self.state, self.lr, self.betas[0], self.betas[1], self.eps)

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.step": np.asarray(self.state.step, dtype=np.float64)}
        for name in self.params:
            out[f"{prefix}.m.{name}"] = self.state.m[name]
            out[f"{prefix}.v.{name}"] = self.state.v[name]
        return out

    def load_state_tensors(self, prefix: str, tensors: dict[str, np.ndarray]) -> None:
        self.state.step = int(tensors[f"{prefix}.step"])
        for name, p in self.params.items():
            self.state.m[name] = tensors[f"{prefix}.m.{name}"].astype(p.dtype, copy=True)
            self.state.v[name] = tensors[f"{prefix}.v.{name}"].astype(p.dtype, copy=True)
