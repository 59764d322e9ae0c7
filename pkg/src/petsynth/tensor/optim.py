"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params: list[np.ndarray], grads: list, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> list[np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays.

    ``None`` gradients are treated as zero.  A zero gradient leaves the
    moments' contribution at zero, so parameters are unchanged.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append((p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype))
    return out


class Adam:
    """Stateful wrapper updating :class:`Tensor` parameters in place."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        new = adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                        self.lr, self.betas[0], self.betas[1], self.eps)
        for p, d in zip(self.params, new):
            p.data = d

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}t": np.array([self.state.t], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"{prefix}m.{i}"] = m
            out[f"{prefix}v.{i}"] = v
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        self.state.t = int(state[f"{prefix}t"][0])
        n = len(self.params)
        if self.state.t == 0:
            self.state.m, self.state.v = [], []
            return
        self.state.m = [np.asarray(state[f"{prefix}m.{i}"], dtype=self.params[i].dtype) for i in range(n)]
        self.state.v = [np.asarray(state[f"{prefix}v.{i}"], dtype=self.params[i].dtype) for i in range(n)]
