"""Base diffusion model bundle and its training loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataset import LabeledExample
from .denoiser import Denoiser, noise_loss
from .nn import Adam, DTYPE
from .schedule import NoiseSchedule, forward_diffuse, make_schedule
from .text import TextEmbedder
from .vocab import Vocabulary


@dataclass
class ModelBundle:
    text: TextEmbedder
    denoiser: Denoiser
    sched: NoiseSchedule
    meta: dict = field(default_factory=dict)

    def named_params(self):
        return {**self.text.named_params(), **self.denoiser.named_params()}

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.named_params()):
            h.update(name.encode())
            h.update(self.named_params()[name].data.tobytes())
        return h.hexdigest()


def make_model(
    vocab_size: int,
    d: int = 64,
    d_attn: int = 64,
    channels: tuple[int, int] = (32, 64),
    T: int = 200,
    n_max: int = 32,
    mixing: float = 1.0,
    schedule_kind: str = "linear",
    seed: int = 0,
) -> ModelBundle:
    text = TextEmbedder(vocab_size, d=d, n_max=n_max, mixing=mixing, seed=seed)
    den = Denoiser(d=d, d_attn=d_attn, channels=channels, seed=seed + 1)
    sched = make_schedule(T, schedule_kind)
    den.sched = sched
    meta = {
        "vocab_size": vocab_size,
        "d": d,
        "d_attn": d_attn,
        "channels": list(channels),
        "T": T,
        "n_max": n_max,
        "mixing": mixing,
        "schedule_kind": schedule_kind,
    }
    return ModelBundle(text=text, denoiser=den, sched=sched, meta=meta)


def save_bundle(model: ModelBundle, path) -> None:
    from .persistence import save_tensors

    tensors = {k: v.data for k, v in model.named_params().items()}
    tensors["sched.betas"] = model.sched.betas.astype(np.float32)
    save_tensors(tensors, path, meta={"kind": "base", **model.meta})


def load_bundle(path) -> ModelBundle:
    from .persistence import load_tensors

    tensors, meta = load_tensors(path)
    model = make_model(
        vocab_size=meta["vocab_size"],
        d=meta["d"],
        d_attn=meta["d_attn"],
        channels=tuple(meta["channels"]),
        T=meta["T"],
        n_max=meta["n_max"],
        mixing=meta["mixing"],
        schedule_kind=meta["schedule_kind"],
    )
    state = {k: v for k, v in tensors.items() if not k.startswith("sched.")}
    model.text.load_state({k: v for k, v in state.items() if k.startswith("text.")})
    model.denoiser.load_state({k: v for k, v in state.items() if k.startswith("den.")})
    return model


def _length_buckets(examples: list[LabeledExample]) -> dict[int, list[int]]:
    buckets: dict[int, list[int]] = {}
    for i, ex in enumerate(examples):
        buckets.setdefault(len(ex.tokens), []).append(i)
    return buckets


def train_base(
    model: ModelBundle,
    examples: list[LabeledExample],
    steps: int = 6000,
    batch_size: int = 16,
    lr: float = 2e-3,
    seed: int = 0,
    log_every: int = 200,
    log=None,
) -> list[dict]:
    """Standard denoising training on labeled scenes.

    Batches are drawn from a single token-length bucket per step so
    conditioning matrices stack without padding.
    """
    rng = np.random.default_rng(seed)
    buckets = _length_buckets(examples)
    lengths = sorted(buckets)
    weights = np.array([len(buckets[n]) for n in lengths], dtype=np.float64)
    weights /= weights.sum()
    params = {**model.text.trainable_params(), **model.denoiser.trainable_params()}
    opt = Adam(params, lr=lr)
    history = []
    for step in range(steps):
        # cosine decay to ~1% of the peak rate: the stochastic noise
        # floor of a constant-rate optimizer is far above the residual
        # accuracy the sampler needs at mid timesteps
        opt.lr = lr * (0.01 + 0.99 * 0.5 * (1.0 + np.cos(np.pi * step / max(1, steps - 1))))
        n = lengths[rng.choice(len(lengths), p=weights)]
        idx = rng.choice(buckets[n], size=batch_size, replace=True)
        batch = [examples[i] for i in idx]
        z0 = np.stack([ex.image for ex in batch]).astype(DTYPE)
        t = rng.integers(1, model.sched.T + 1, size=len(batch))
        eps = rng.standard_normal(z0.shape).astype(DTYPE)
        z_t = forward_diffuse(z0, t, eps, model.sched)
        c = model.text.encode_batch([ex.tokens for ex in batch])
        eps_hat, _ = model.denoiser.predict(z_t, t, c)
        loss = noise_loss(eps, eps_hat)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            rec = {"step": step, "loss": float(loss.data)}
            history.append(rec)
            if log:
                log(f"step {step}: noise loss {rec['loss']:.4f}")
    return history
