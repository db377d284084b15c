"""Evaluation protocols: category accuracy, harmonic mean, pair-count
scaling, attention-mask IoU, ablation sweeps, and inference benchmarks.

All experiments are deterministic given (config hash, master seed); CSV
rows are emitted per prompt x seed with JSON summaries alongside.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from math import comb
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .fusion import downsample_mask
from .grammar import PromptParse, parse_prompt
from .oracle import binding_score
from .sampler import ddim_invert, ddim_sample
from .training import ModelBundle
from .nn import DTYPE
from .vocab import Vocabulary


class ZeroScore(ValueError):
    pass


def harmonic_mean(c: float, t: float, s: float) -> float:
    """HM = 3 / (1/C + 1/T + 1/S)."""
    if c <= 0 or t <= 0 or s <= 0:
        raise ZeroScore(f"harmonic mean undefined for ({c}, {t}, {s})")
    return 3.0 / (1.0 / c + 1.0 / t + 1.0 / s)


@dataclass
class EvalReport:
    color: float
    texture: float
    shape: float
    hm: float
    per_prompt: dict[str, float]
    n_seeds: int
    config_hash: str

    def __post_init__(self):
        expect = harmonic_mean(self.color, self.texture, self.shape)
        if abs(self.hm - expect) > 1e-9:
            raise ValueError(f"stored HM {self.hm} inconsistent with scores")

    @classmethod
    def build(cls, color, texture, shape, per_prompt, n_seeds, config_hash):
        return cls(
            color=color,
            texture=texture,
            shape=shape,
            hm=harmonic_mean(color, texture, shape),
            per_prompt=per_prompt,
            n_seeds=n_seeds,
            config_hash=config_hash,
        )

    def to_dict(self) -> dict:
        return {
            "color": self.color,
            "texture": self.texture,
            "shape": self.shape,
            "hm": self.hm,
            "per_prompt": self.per_prompt,
            "n_seeds": self.n_seeds,
            "config_hash": self.config_hash,
        }


@dataclass
class ScalingRow:
    n_pairs: int
    model: str
    mean_score: float
    wall_time: float


@dataclass
class ScalingTable:
    rows: list[ScalingRow]

    def __post_init__(self):
        per_model: dict[str, list[int]] = {}
        for r in self.rows:
            per_model.setdefault(r.model, []).append(r.n_pairs)
        for model, ns in per_model.items():
            if ns != sorted(ns):
                raise ValueError(f"rows for {model!r} not ascending in n_pairs")

    def score(self, model: str, n_pairs: int) -> float:
        for r in self.rows:
            if r.model == model and r.n_pairs == n_pairs:
                return r.mean_score
        raise KeyError((model, n_pairs))


# -- samplers --------------------------------------------------------------


def prompt_seeds(prompt_index: int, n_seeds: int, master_seed: int = 0) -> list[int]:
    """Deterministic per-prompt seed list, shared across models so that
    comparisons are paired on identical initial noise."""
    return [master_seed * 10_000_000 + prompt_index * 10_000 + s for s in range(n_seeds)]


class BaseSampler:
    """Plain text-conditioned generation from the base bundle."""

    name = "base"

    def __init__(self, bundle: ModelBundle, vocab: Vocabulary, n_steps: int = 50):
        self.bundle = bundle
        self.vocab = vocab
        self.n_steps = n_steps

    def generate(self, prompt: str, seeds: list[int]) -> np.ndarray:
        parse = parse_prompt(prompt, self.vocab)
        with ad.no_grad():
            c = self.bundle.text.encode(parse.tokens).data
        c_batch = np.broadcast_to(c[None], (len(seeds),) + c.shape).copy()
        z_init = np.stack(
            [np.random.default_rng(s).standard_normal((3, 32, 32)) for s in seeds]
        ).astype(DTYPE)
        imgs, _ = ddim_sample(
            self.bundle.denoiser, self.bundle.sched, c_batch,
            n_steps=self.n_steps, z_init=z_init,
        )
        return imgs

    def conditioning(self, prompt: str) -> np.ndarray:
        with ad.no_grad():
            return self.bundle.text.encode(parse_prompt(prompt, self.vocab).tokens).data


class VSCSampler:
    """Prototype-fused generation; references come from the shared cache."""

    name = "vsc"

    def __init__(self, vsc, bundle: ModelBundle, vocab: Vocabulary,
                 m: int = 3, cache_dir=None, n_steps: int = 50):
        self.vsc = vsc
        self.bundle = bundle
        self.vocab = vocab
        self.m = m
        self.cache_dir = cache_dir
        self.n_steps = n_steps

    def generate(self, prompt: str, seeds: list[int]) -> np.ndarray:
        from .vsc import vsc_generate

        return vsc_generate(
            prompt, self.vsc, self.bundle, self.vocab, m=self.m,
            cache_dir=self.cache_dir, n_steps=self.n_steps, batch_seeds=seeds,
        )

    def conditioning(self, prompt: str) -> np.ndarray:
        from .vsc import fused_conditioning, generate_references

        parse = parse_prompt(prompt, self.vocab)
        pairs = [(p.attr_token, p.obj_token) for p in parse.pairs]
        refs = generate_references(
            pairs, self.m, self.bundle, self.vocab,
            cache_dir=self.cache_dir, n_steps=self.n_steps,
        )
        return fused_conditioning(prompt, self.vsc, self.bundle, refs, self.vocab)


# -- accuracy --------------------------------------------------------------


def prompt_accuracy(sampler, prompt: str, seeds: list[int], vocab: Vocabulary):
    """Per-seed binding scores for one prompt."""
    parse = parse_prompt(prompt, vocab)
    imgs = sampler.generate(prompt, seeds)
    return [binding_score(np.asarray(img), parse, vocab) for img in imgs]


def category_accuracy(
    sampler, prompts: list[str], vocab: Vocabulary,
    n_seeds: int = 100, master_seed: int = 0,
) -> tuple[float, dict[str, float], list[dict]]:
    """Mean binding score over prompts x seeds.

    Returns (mean, per-prompt means, per-sample records for CSV export).
    """
    per_prompt: dict[str, float] = {}
    records: list[dict] = []
    for pi, prompt in enumerate(prompts):
        seeds = prompt_seeds(pi, n_seeds, master_seed)
        scores = prompt_accuracy(sampler, prompt, seeds, vocab)
        per_prompt[prompt] = float(np.mean(scores))
        for s, sc in zip(seeds, scores):
            records.append({"prompt": prompt, "seed": s, "score": sc, "model": sampler.name})
    mean = float(np.mean([per_prompt[p] for p in prompts])) if prompts else 0.0
    return mean, per_prompt, records


def sign_test(diffs, alpha: float = 0.01) -> dict:
    """Exact paired sign test (two-sided) ignoring ties."""
    pos = int(sum(1 for d in diffs if d > 0))
    neg = int(sum(1 for d in diffs if d < 0))
    n = pos + neg
    if n == 0:
        return {"n": 0, "pos": 0, "neg": 0, "p_value": 1.0, "significant": False}
    k = min(pos, neg)
    tail = sum(comb(n, i) for i in range(k + 1)) / 2.0**n
    p = min(1.0, 2.0 * tail)
    return {"n": n, "pos": pos, "neg": neg, "p_value": p, "significant": p < alpha}


# -- pair-count scaling ----------------------------------------------------


def scaling_pairs_experiment(
    samplers: list,
    prompts_by_n: dict[int, list[str]],
    vocab: Vocabulary,
    n_seeds: int = 20,
    master_seed: int = 0,
) -> ScalingTable:
    """One row per (model, n_pairs); prompts shared across models."""
    rows = []
    for sampler in samplers:
        for n in sorted(prompts_by_n):
            t0 = time.perf_counter()
            mean, _, _ = category_accuracy(
                sampler, prompts_by_n[n], vocab, n_seeds=n_seeds,
                master_seed=master_seed + n,
            )
            rows.append(
                ScalingRow(
                    n_pairs=n, model=sampler.name, mean_score=mean,
                    wall_time=time.perf_counter() - t0,
                )
            )
    return ScalingTable(rows=rows)


# -- attention-mask IoU ----------------------------------------------------


def attention_iou(attn, parse: PromptParse, masks: np.ndarray) -> np.ndarray:
    """Per-pair IoU between binarized attention and the pair's mask.

    Each token map is binarized at its own mean; the pair's value is the
    min over its two tokens, averaged across attention layers.
    """
    vals = np.zeros((len(attn), len(parse.pairs)))
    for li, a in enumerate(attn):
        data = a.data if isinstance(getattr(a, "data", None), np.ndarray) else np.asarray(a)
        if data.ndim == 3:
            data = data[0]
        hw = data.shape[0]
        side = int(round(np.sqrt(hw)))
        for j, pair in enumerate(parse.pairs):
            m = downsample_mask(masks[j], side, side).reshape(-1)
            ious = []
            for tok in (pair.attr_index, pair.obj_index):
                hot = data[:, tok] >= data[:, tok].mean()
                union = np.logical_or(hot, m).sum()
                inter = np.logical_and(hot, m).sum()
                ious.append(inter / union if union else 0.0)
            vals[li, j] = min(ious)
    return vals.mean(axis=0)


def inverted_attention(
    bundle: ModelBundle, image: np.ndarray, c: np.ndarray, invert_t: int = 20, n_steps: int = 50
):
    """Attention stack at a partially re-noised latent.

    The image is DDIM-inverted to the grid timestep nearest invert_t and
    one denoiser call at that timestep captures the maps.
    """
    z, t_reached = ddim_invert(bundle.denoiser, bundle.sched, image, c, invert_t, n_steps=n_steps)
    with ad.no_grad():
        _, attn = bundle.denoiser.predict(z[None], t_reached, ad.Tensor(c[None].astype(DTYPE)))
    return attn


# -- benchmarking ----------------------------------------------------------


def inference_benchmark(
    samplers: list,
    prompts_by_n: dict[int, list[str]],
    vocab: Vocabulary,
    repeats: int = 3,
    clear_cache=None,
) -> list[dict]:
    """Median wall time per (model, n_pairs) plus sampler-call accounting.

    ``clear_cache`` optionally resets the reference cache before each
    timed run so reference generation cost is included.
    """
    from .sampler import record_sampler_calls

    rows = []
    for sampler in samplers:
        for n in sorted(prompts_by_n):
            prompt = prompts_by_n[n][0]
            times = []
            calls = None
            for r in range(repeats):
                if clear_cache:
                    clear_cache()
                with record_sampler_calls() as rec:
                    t0 = time.perf_counter()
                    sampler.generate(prompt, [1000 + r])
                    times.append(time.perf_counter() - t0)
                calls = list(rec)
            # warm pass: the last cold run left the reference cache populated
            with record_sampler_calls() as wrec:
                sampler.generate(prompt, [2000])
            rows.append(
                {
                    "model": sampler.name,
                    "n_pairs": n,
                    "median_time": float(np.median(times)),
                    "sampler_runs_cold": len(calls),
                    "sampler_runs_warm": len(wrec),
                    "run_batches": [c[0] for c in calls],
                    "run_steps": [c[1] for c in calls],
                }
            )
    return rows


# -- report files ----------------------------------------------------------


def write_csv(records: list[dict], path: str | Path) -> None:
    path = Path(path)
    if not records:
        path.write_text("")
        return
    keys = list(records[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        for r in records:
            writer.writerow({k: r.get(k) for k in keys})


def write_json(doc, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=float))
