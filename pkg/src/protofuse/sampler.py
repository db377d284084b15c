"""Deterministic DDIM sampling and inversion (eta = 0)."""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import Denoiser
from .nn import DTYPE
from .schedule import NoiseSchedule


_call_log: list | None = None


@contextmanager
def record_sampler_calls():
    """Record (batch_size, n_denoiser_calls) per ddim_sample run.

    Used by the benchmark to prove reference generation is batched: the
    number of recorded runs is independent of the pair count.
    """
    global _call_log
    prev, _call_log = _call_log, []
    try:
        yield _call_log
    finally:
        _call_log = prev


def ddim_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Increasing 1-based timestep grid ending at T."""
    if n_steps > T:
        raise ValueError(f"n_steps {n_steps} > T {T}")
    ts = np.unique(np.round(np.linspace(1, T, n_steps)).astype(int))
    return ts


def _x0_from_eps(z, eps, ab):
    return (z - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def ddim_sample(
    denoiser: Denoiser,
    sched: NoiseSchedule,
    c: Tensor | np.ndarray,
    n_steps: int = 50,
    rng_seed: int = 0,
    shape: tuple[int, int, int] = (3, 32, 32),
    batch: int = 1,
    trace_attention: bool = False,
    z_init: np.ndarray | None = None,
):
    """Deterministic DDIM generation; final image clamped to [-1, 1].

    Returns (images, attention_trace); the trace is a list (one entry
    per step) of attention-stack lists when requested, else None.
    """
    if not isinstance(c, Tensor):
        c = Tensor(np.asarray(c, dtype=DTYPE))
    if c.data.ndim == 2:
        c = Tensor(np.broadcast_to(c.data[None], (batch,) + c.data.shape).copy())
    batch = c.data.shape[0]
    if z_init is None:
        rng = np.random.default_rng(rng_seed)
        z = rng.standard_normal((batch,) + shape).astype(DTYPE)
    else:
        z = np.asarray(z_init, dtype=DTYPE)
    ts = ddim_timesteps(sched.T, n_steps)
    if _call_log is not None:
        _call_log.append((batch, len(ts)))
    trace = [] if trace_attention else None
    with ad.no_grad():
        for i in range(len(ts) - 1, -1, -1):
            t = int(ts[i])
            t_prev = int(ts[i - 1]) if i > 0 else 0
            eps_hat, attn = denoiser.predict(z, t, c)
            if trace is not None:
                trace.append((t, [a.data.copy() for a in attn]))
            ab_t = sched.alpha_bar(t)
            ab_prev = sched.alpha_bar(t_prev)
            # clip the x0 estimate to the data range and recompute a
            # consistent eps: at high t the extrapolation divides by
            # sqrt(alpha_bar) ~ 0, and without the clamp + recompute any
            # eps error compounds across steps and blows up the trajectory
            x0 = np.clip(_x0_from_eps(z, eps_hat.data, ab_t), -1.0, 1.0)
            eps_c = (z - np.sqrt(ab_t) * x0) / np.sqrt(1.0 - ab_t)
            z = (np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_c).astype(DTYPE)
    return np.clip(z, -1.0, 1.0), trace


def ddim_invert(
    denoiser: Denoiser,
    sched: NoiseSchedule,
    image: np.ndarray,
    c: Tensor | np.ndarray,
    to_t: int,
    n_steps: int = 50,
):
    """Run the deterministic DDIM update in reverse up to timestep to_t.

    Returns (z_to_t, t_reached) where t_reached is the grid timestep
    nearest to the requested to_t.
    """
    if not isinstance(c, Tensor):
        c = Tensor(np.asarray(c, dtype=DTYPE))
    z = np.asarray(image, dtype=DTYPE)
    squeeze = z.ndim == 3
    if squeeze:
        z = z[None]
    if c.data.ndim == 2:
        c = Tensor(np.broadcast_to(c.data[None], (z.shape[0],) + c.data.shape).copy())
    ts = ddim_timesteps(sched.T, n_steps)
    stop = int(np.argmin(np.abs(ts - to_t)))
    with ad.no_grad():
        t_lo = 0
        for i in range(stop + 1):
            t_hi = int(ts[i])
            eps_hat, _ = denoiser.predict(z, t_hi, c)
            ab_lo = sched.alpha_bar(t_lo)
            ab_hi = sched.alpha_bar(t_hi)
            x0 = _x0_from_eps(z, eps_hat.data, ab_lo)
            z = (np.sqrt(ab_hi) * x0 + np.sqrt(1.0 - ab_hi) * eps_hat.data).astype(DTYPE)
            t_lo = t_hi
    return (z[0] if squeeze else z), t_lo
