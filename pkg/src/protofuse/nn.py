"""Parameter registry, initializers, and optimizers for the toy models."""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import Tensor

DTYPE = np.float32


class ParamStore:
    """Flat name -> Tensor registry shared by all models."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def param(self, name: str, array: np.ndarray, trainable: bool = True) -> Tensor:
        t = Tensor(np.asarray(array, dtype=DTYPE), requires_grad=trainable, name=name)
        self._params[name] = t
        return t

    def named_params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if v.requires_grad}

    def set_trainable(self, names, trainable: bool) -> None:
        for n in names:
            self._params[n].requires_grad = trainable

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            if state[name].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            t.data = state[name].astype(DTYPE)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def content_hash(self, names=None) -> str:
        """SHA-256 over selected parameter bytes, in sorted name order."""
        h = hashlib.sha256()
        for name in sorted(names if names is not None else self._params):
            h.update(name.encode())
            h.update(self._params[name].data.astype(np.float32).tobytes())
        return h.hexdigest()


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=(fan_in, fan_out))


def conv_init(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (c_in * k * k))
    return rng.normal(0.0, scale, size=(c_out, c_in, k, k))


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps; shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(DTYPE)


class SGDMomentum:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.vel = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self):
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.vel[k] = self.momentum * self.vel[k] + p.grad
            p.data = p.data - self.lr * self.vel[k].astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class Adam:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1t = 1 - self.beta1**self.t
        b2t = 1 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)
            p.data = p.data - (self.lr * update).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
