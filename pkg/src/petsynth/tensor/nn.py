"""Layers built on the autodiff core: instance norm, spectral norm, modules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import conv3d, conv3d_transpose
from .core import Tensor, as_tensor, get_default_dtype, parameter

SN_EPS = 1e-12


def instance_norm3d(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
                    eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) over its spatial axes, then optional affine."""
    x = as_tensor(x)
    axes = (2, 3, 4)
    n = int(np.prod(x.shape[2:]))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * inv_std
    shape = (1, -1, 1, 1, 1)
    gamma = weight.data.reshape(shape) if weight is not None else None
    out = xhat * gamma if gamma is not None else xhat
    if bias is not None:
        out = out + bias.data.reshape(shape)
    out = out.astype(x.dtype)

    def backward(g):
        dxhat = g * gamma if gamma is not None else g
        gx = inv_std / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3, 4)))
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    parents = tuple(t for t in (x, weight, bias) if t is not None)
    return Tensor._from_op(out, parents, backward)


@dataclass
class SpectralState:
    """Persistent left singular-vector estimate for one weight."""

    u: np.ndarray
    n_power_iterations: int = 1

    def __post_init__(self):
        if self.n_power_iterations < 1:
            raise ValueError("n_power_iterations must be >= 1")
        self.u = _unit(np.asarray(self.u, dtype=np.float64), None)

    @classmethod
    def random(cls, n_out: int, rng: np.random.Generator, n_power_iterations: int = 1) -> SpectralState:
        return cls(rng.normal(size=n_out), n_power_iterations)


def _unit(x: np.ndarray, fallback: np.ndarray | None) -> np.ndarray:
    norm = float(np.linalg.norm(x))
    if norm < SN_EPS:
        if fallback is None:
            raise ValueError("cannot normalize a zero vector")
        return fallback
    return x / norm


def power_iteration(W: np.ndarray, state: SpectralState, n_iterations: int | None = None) -> np.ndarray:
    """Update ``state.u`` in place; returns the matching right vector ``v``."""
    W = W.astype(np.float64)
    u = state.u
    v = _unit(W.T @ u, np.zeros(W.shape[1]))
    for _ in range(n_iterations or state.n_power_iterations):
        v = _unit(W.T @ u, v)
        u = _unit(W @ v, u)
    state.u = u
    return v


def spectral_normalize(weight: Tensor, state: SpectralState, update: bool = True) -> Tensor:
    """``weight / sigma`` with ``sigma = u^T W v`` from the power-iteration estimate.

    ``weight`` is viewed as (out, rest).  ``u`` and ``v`` are treated as
    constants in the backward pass.  A zero matrix gives zeros (sigma is
    floored at 1e-12).
    """
    weight = as_tensor(weight)
    W = weight.data.reshape(weight.shape[0], -1)
    if update:
        v = power_iteration(W, state)
    else:
        v = _unit(W.T.astype(np.float64) @ state.u, np.zeros(W.shape[1]))
    u = state.u
    sigma = max(float(u @ W.astype(np.float64) @ v), SN_EPS)
    out = (weight.data / sigma).astype(weight.dtype)
    uv = np.outer(u, v).reshape(weight.shape)

    def backward(g):
        gw = g / sigma - (float(np.sum(g * weight.data, dtype=np.float64)) / sigma ** 2) * uv
        return (gw.astype(weight.dtype),)

    return Tensor._from_op(out, (weight,), backward)


class Module:
    """Minimal parameter container; attributes holding tensors, modules,
    lists of modules or spectral states are discovered by reflection."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    yield f"{name}.{i}", item
            else:
                yield name, val

    def named_parameters(self, prefix: str = ""):
        for name, val in self._children():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, val in self._children():
            if isinstance(val, SpectralState):
                yield f"{prefix}{name}.u", val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: s.u.copy() for name, s in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.asarray(state[name], dtype=p.dtype).copy()
        for name, s in buffers.items():
            s.u = np.asarray(state[name], dtype=np.float64).copy()


def _init_weight(shape, rng: np.random.Generator, std: float) -> np.ndarray:
    return (rng.normal(0.0, std, size=shape)).astype(get_default_dtype())


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, *,
                 rng: np.random.Generator, bias: bool = True, spectral_norm: bool = False,
                 init_std: float = 0.02):
        self.stride, self.padding = stride, padding
        self.weight = parameter(_init_weight((cout, cin, k, k, k), rng, init_std))
        self.bias = parameter(np.zeros(cout)) if bias else None
        self.sn = SpectralState.random(cout, rng) if spectral_norm else None

    def effective_weight(self) -> Tensor:
        if self.sn is None:
            return self.weight
        return spectral_normalize(self.weight, self.sn, update=self.training)

    def forward(self, x):
        return conv3d(x, self.effective_weight(), self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, *,
                 rng: np.random.Generator, bias: bool = True, init_std: float = 0.02):
        self.stride, self.padding = stride, padding
        self.weight = parameter(_init_weight((cin, cout, k, k, k), rng, init_std))
        self.bias = parameter(np.zeros(cout)) if bias else None

    def forward(self, x):
        return conv3d_transpose(x, self.weight, self.bias, self.stride, self.padding)


class InstanceNorm3d(Module):
    def __init__(self, channels: int, affine: bool = True, eps: float = 1e-5):
        self.eps = eps
        self.weight = parameter(np.ones(channels)) if affine else None
        self.bias = parameter(np.zeros(channels)) if affine else None

    def forward(self, x):
        return instance_norm3d(x, self.weight, self.bias, self.eps)
