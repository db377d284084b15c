"""DDPM noise schedules and the forward noising process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BadT(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # length T, index 0 is timestep t=1
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t) -> np.ndarray:
        """Cumulative product at timestep t (1-based); t=0 maps to 1."""
        t = np.asarray(t)
        ab = np.concatenate([[1.0], self.alpha_bars])
        return ab[t]


def make_schedule(T: int, kind: str = "linear") -> NoiseSchedule:
    if T < 2:
        raise BadT(f"need T >= 2, got {T}")
    if kind == "linear":
        # DDPM's [1e-4, 0.02] range is calibrated for T=1000; rescale so
        # shorter schedules keep the same (near-zero) terminal alpha_bar
        scale = 1000.0 / T
        betas = np.clip(np.linspace(1e-4 * scale, 0.02 * scale, T), 1e-8, 0.999)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1)
        f = np.cos((steps / T + s) / (1 + s) * np.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1 - ab[1:] / ab[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        betas=betas.astype(np.float64),
        alphas=alphas.astype(np.float64),
        alpha_bars=alpha_bars.astype(np.float64),
    )


def forward_diffuse(z0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, broadcasting t over the batch."""
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"z0 {z0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bar(t)
    ab = np.reshape(ab, (-1,) + (1,) * (z0.ndim - 1)) if np.ndim(ab) else ab
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype)
