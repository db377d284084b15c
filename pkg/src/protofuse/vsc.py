"""Pairwise reference generation, prototype fusion training, and inference.

The frozen base model supplies single-pair competence; this module
generates reference images per binding pair, embeds them into visual
prototypes, and trains only the fusion MLP and the image-encoder tail
under the combined noise + localization objective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import LabeledExample
from .denoiser import noise_loss
from .fusion import (
    FusionMLP,
    ImageEncoder,
    fuse_embeddings,
    localization_loss_batched,
    orthogonal_projection,
    prototype,
    total_loss,
)
from .grammar import parse_prompt, single_pair_prompt
from .nn import DTYPE, SGDMomentum
from .sampler import ddim_sample
from .schedule import forward_diffuse
from .training import ModelBundle
from .vocab import Vocabulary


class FrozenViolation(RuntimeError):
    pass


@dataclass
class ReferenceSet:
    """Per-pair reference images with provenance; embeddings are computed
    on demand because the encoder tail changes during training."""

    images: dict[tuple[int, int], np.ndarray]  # pair -> (m, 3, H, W)
    seeds: dict[tuple[int, int], list[int]]
    prompts: dict[tuple[int, int], str]

    def pairs(self):
        return sorted(self.images)


def reference_seed(pair: tuple[int, int], k: int, base_seed: int = 9000) -> int:
    # stable per (pair, replica): cache entries survive across runs
    return base_seed + pair[0] * 1009 + pair[1] * 101 + k


def generate_references(
    pairs,
    m: int,
    bundle: ModelBundle,
    vocab: Vocabulary,
    cache_dir: str | Path | None = None,
    n_steps: int = 50,
    base_seed: int = 9000,
) -> ReferenceSet:
    """DDIM-sample m reference images per pair, all pairs in one batched run.

    Results are cached per (pair, seed); cached pairs cost zero sampler
    calls.  Pair order does not affect content.
    """
    from .persistence import load_tensors, save_tensors

    pairs = sorted({(int(a), int(o)) for a, o in pairs})
    images: dict[tuple[int, int], np.ndarray] = {}
    seeds = {p: [reference_seed(p, k, base_seed) for k in range(m)] for p in pairs}
    prompts = {p: single_pair_prompt(p, vocab) for p in pairs}
    model_hash = bundle.content_hash()

    todo: list[tuple[tuple[int, int], int]] = []
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
    loaded: dict[tuple[tuple[int, int], int], np.ndarray] = {}
    for p in pairs:
        for k, seed in enumerate(seeds[p]):
            fname = cache / f"ref_{p[0]}_{p[1]}_{seed}.vsck" if cache else None
            if fname and fname.exists():
                tensors, meta = load_tensors(fname)
                if meta.get("model_hash") == model_hash:
                    loaded[(p, seed)] = tensors["image"]
                    continue
            todo.append((p, seed))

    if todo:
        cs = []
        z0 = []
        with ad.no_grad():
            for p, seed in todo:
                toks = [vocab.id(w) for w in prompts[p].split()]
                cs.append(bundle.text.encode(toks).data)
                z0.append(np.random.default_rng(seed).standard_normal((3, 32, 32)))
        c_batch = np.stack(cs).astype(DTYPE)
        z_init = np.stack(z0).astype(DTYPE)
        imgs, _ = ddim_sample(
            bundle.denoiser, bundle.sched, c_batch, n_steps=n_steps, z_init=z_init
        )
        for (p, seed), img in zip(todo, imgs):
            loaded[(p, seed)] = img
            if cache:
                save_tensors(
                    {"image": img},
                    cache / f"ref_{p[0]}_{p[1]}_{seed}.vsck",
                    meta={"model_hash": model_hash, "seed": seed, "prompt": prompts[p]},
                )
                sidecar = cache / f"ref_{p[0]}_{p[1]}_{seed}.json"
                sidecar.write_text(
                    json.dumps(
                        {"prompt": prompts[p], "seed": seed, "model_hash": model_hash},
                        sort_keys=True,
                    )
                )

    for p in pairs:
        images[p] = np.stack([loaded[(p, seed)] for seed in seeds[p]]).astype(DTYPE)
    return ReferenceSet(images=images, seeds=seeds, prompts=prompts)


@dataclass
class VSCModel:
    phi: ImageEncoder
    mlp: FusionMLP
    projection: np.ndarray  # fixed (d, D)
    lam: float = 0.1
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, d: int = 64, D: int = 128, lam: float = 0.1, seed: int = 0) -> "VSCModel":
        return cls(
            phi=ImageEncoder(out_dim=D, seed=seed),
            mlp=FusionMLP(d=d, seed=seed + 1),
            projection=orthogonal_projection(D, d),
            lam=lam,
            meta={"d": d, "D": D},
        )

    def prototypes_for(self, pairs, refs: ReferenceSet) -> dict[int, Tensor]:
        """Pair-id -> prototype Tensor, encoding all references in one batch."""
        pairs = list(pairs)
        stacked = np.concatenate([refs.images[p] for p in pairs], axis=0)
        emb = self.phi.encode(stacked)
        out = {}
        off = 0
        for j, p in enumerate(pairs):
            m = refs.images[p].shape[0]
            out[j] = prototype(ad.gather_rows(emb, list(range(off, off + m))))
            off += m
        return out

    def named_params(self):
        return {**self.phi.named_params(), **self.mlp.named_params()}


def save_vsc(vsc: VSCModel, bundle: ModelBundle, path) -> None:
    from .persistence import save_tensors

    tensors = {k: v.data for k, v in vsc.named_params().items()}
    tensors["proj"] = vsc.projection
    save_tensors(
        tensors,
        path,
        meta={
            "kind": "vsc",
            "lam": vsc.lam,
            "frozen_hash": bundle.content_hash(),
            **vsc.meta,
        },
    )


def load_vsc(path, bundle: ModelBundle | None = None) -> VSCModel:
    from .persistence import load_tensors

    tensors, meta = load_tensors(path)
    vsc = VSCModel.create(d=meta["d"], D=meta["D"], lam=meta["lam"])
    vsc.phi.load_state({k: v for k, v in tensors.items() if k.startswith("phi.")})
    vsc.mlp.load_state({k: v for k, v in tensors.items() if k.startswith("mlp.")})
    vsc.projection = tensors["proj"]
    if bundle is not None and meta.get("frozen_hash") not in (None, bundle.content_hash()):
        raise FrozenViolation("checkpoint was trained against a different base model")
    return vsc


def fused_conditioning(
    prompt: str,
    vsc: VSCModel,
    bundle: ModelBundle,
    refs: ReferenceSet,
    vocab: Vocabulary,
) -> np.ndarray:
    """Full fusion path for one prompt; returns c' as an (n, d) array."""
    parse = parse_prompt(prompt, vocab)
    pairs = [(p.attr_token, p.obj_token) for p in parse.pairs]
    with ad.no_grad():
        c = bundle.text.encode(parse.tokens)
        protos = vsc.prototypes_for(pairs, refs)
        c_prime = fuse_embeddings(c, parse, protos, vsc.mlp, vsc.projection)
    return c_prime.data


def vsc_generate(
    prompt: str,
    vsc: VSCModel,
    bundle: ModelBundle,
    vocab: Vocabulary,
    m: int = 4,
    seed: int = 0,
    cache_dir: str | Path | None = None,
    n_steps: int = 50,
    batch_seeds: list[int] | None = None,
) -> np.ndarray:
    """Parse, generate references, fuse, and DDIM-sample the final image."""
    parse = parse_prompt(prompt, vocab)
    pairs = [(p.attr_token, p.obj_token) for p in parse.pairs]
    refs = generate_references(pairs, m, bundle, vocab, cache_dir=cache_dir, n_steps=n_steps)
    c_prime = fused_conditioning(prompt, vsc, bundle, refs, vocab)
    seeds = batch_seeds if batch_seeds is not None else [seed]
    z_init = np.stack(
        [np.random.default_rng(s).standard_normal((3, 32, 32)) for s in seeds]
    ).astype(DTYPE)
    c_batch = np.broadcast_to(c_prime[None], (len(seeds),) + c_prime.shape).copy()
    imgs, _ = ddim_sample(bundle.denoiser, bundle.sched, c_batch, n_steps=n_steps, z_init=z_init)
    return imgs if batch_seeds is not None else imgs[0]


def train_vsc(
    vsc: VSCModel,
    bundle: ModelBundle,
    examples: list[LabeledExample],
    refs: ReferenceSet,
    vocab: Vocabulary,
    steps: int = 3000,
    batch_size: int = 8,
    lr: float = 1e-3,
    momentum: float = 0.9,
    seed: int = 0,
    phi_tail_trainable: bool = True,
    log_every: int = 100,
    log=None,
) -> list[dict]:
    """Optimize the fusion MLP (and optionally the encoder tail) under
    L_noise + lambda * L_loc with the base model frozen.

    Raises FrozenViolation if any frozen base parameter changes.
    """
    for t in bundle.named_params().values():
        t.requires_grad = False
    vsc.phi.freeze_except_tail(tail_trainable=phi_tail_trainable)
    for t in vsc.mlp.named_params().values():
        t.requires_grad = True

    frozen_hash_before = bundle.content_hash()
    rng = np.random.default_rng(seed)

    buckets: dict[int, list[int]] = {}
    for i, ex in enumerate(examples):
        buckets.setdefault(len(ex.tokens), []).append(i)
    lengths = sorted(buckets)
    weights = np.array([len(buckets[n]) for n in lengths], dtype=np.float64)
    weights /= weights.sum()

    trainable = {
        **vsc.mlp.trainable_params(),
        **vsc.phi.trainable_params(),
    }
    opt = SGDMomentum(trainable, lr=lr, momentum=momentum)
    history = []
    for step in range(steps):
        n = lengths[rng.choice(len(lengths), p=weights)]
        idx = rng.choice(buckets[n], size=min(batch_size, len(buckets[n])), replace=True)
        batch = [examples[i] for i in idx]
        b = len(batch)
        n_pairs = len(batch[0].parse.pairs)
        pair_positions = [
            (p.attr_index, p.obj_index) for p in batch[0].parse.pairs
        ]  # shared template

        # unique pairs in this batch -> prototypes (through trainable phi)
        unique_pairs = sorted(
            {(p.attr_token, p.obj_token) for ex in batch for p in ex.parse.pairs}
        )
        pair_index = {p: i for i, p in enumerate(unique_pairs)}
        protos = vsc.prototypes_for(unique_pairs, refs)

        c = bundle.text.encode_batch([ex.tokens for ex in batch])  # (B, n, d)
        d = c.data.shape[2]
        flat = ad.reshape(c, (b * n, d))
        idx_rows: list[int] = []
        proto_rows: list[Tensor] = []
        for bi, ex in enumerate(batch):
            for p in ex.parse.pairs:
                e = protos[pair_index[(p.attr_token, p.obj_token)]]
                for tok in (p.attr_index, p.obj_index):
                    idx_rows.append(bi * n + tok)
                    proto_rows.append(e)
        rows = ad.gather_rows(flat, idx_rows)
        proj_t = Tensor(vsc.projection.astype(DTYPE))
        pm = ad.concat(
            [ad.reshape(e, (1, -1)) for e in proto_rows], axis=0
        )  # (R, D)
        pm = ad.matmul(pm, ad.transpose(proj_t, (1, 0)))  # (R, d)
        fused = vsc.mlp.forward(ad.concat([rows, pm], axis=1))
        c_prime = ad.reshape(ad.set_rows(flat, idx_rows, fused), (b, n, d))

        z0 = np.stack([ex.image for ex in batch]).astype(DTYPE)
        t = rng.integers(1, bundle.sched.T + 1, size=b)
        eps = rng.standard_normal(z0.shape).astype(DTYPE)
        z_t = forward_diffuse(z0, t, eps, bundle.sched)
        eps_hat, attn = bundle.denoiser.predict(z_t, t, c_prime)
        l_noise = noise_loss(eps, eps_hat)
        masks_batch = np.stack([ex.masks for ex in batch])
        l_loc = localization_loss_batched(attn, pair_positions, masks_batch)
        loss = total_loss(l_noise, l_loc, vsc.lam)

        opt.zero_grad()
        loss.backward()
        opt.step()
        rec = {
            "step": step,
            "loss": float(loss.data),
            "l_noise": float(l_noise.data),
            "l_loc": float(l_loc.data),
        }
        history.append(rec)
        if log and (step % log_every == 0 or step == steps - 1):
            log(
                f"step {step}: total {rec['loss']:.4f} "
                f"noise {rec['l_noise']:.4f} loc {rec['l_loc']:.4f}"
            )

    if bundle.content_hash() != frozen_hash_before:
        raise FrozenViolation("frozen base parameters changed during VSC training")
    return history
