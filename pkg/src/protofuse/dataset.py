"""Training-set synthesis and the binary example-record file format.

Synthesis mirrors a candidate over-generation pipeline: render several
jittered candidates per prompt, score each with the detection oracle,
keep the best few, and align masks to prompt pairs with the greedy
assignment over alignment scores.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grammar import PromptParse, canonical_prompt, parse_prompt
from .oracle import binding_score, greedy_assign, oracle_alignment
from .render import CANVAS, CHANNELS, sample_scene, render_scene, SceneSpec
from .vocab import Vocabulary

MAGIC = b"GLYD"
VERSION = 1


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class LabeledExample:
    image: np.ndarray  # C x H x W float32 in [-1, 1]
    tokens: tuple[int, ...]
    parse: PromptParse
    masks: np.ndarray  # n_pairs x H x W bool, index-aligned with parse.pairs
    oracle_score: float

    def __post_init__(self):
        if self.masks.shape[0] != len(self.parse.pairs):
            raise ValueError("one mask per pair required")


@dataclass
class SynthesisConfig:
    prompts: list[str]  # canonical prompt strings
    k_gen: int = 10
    k_keep: int = 3
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.k_keep > self.k_gen:
            raise ConfigError(f"k_keep={self.k_keep} > k_gen={self.k_gen}")
        if self.k_gen < 1:
            raise ConfigError("k_gen must be >= 1")


def _render_candidate(parse: PromptParse, cand_seed: int, sigma: float, vocab: Vocabulary):
    """Jittered render of the prompt's scene: random placements plus pixel noise."""
    rng = np.random.default_rng(cand_seed)
    pairs = tuple((p.attr_token, p.obj_token) for p in parse.pairs)
    cells = [(r, c) for r in range(2) for c in range(3)]
    idx = rng.choice(len(cells), size=len(pairs), replace=False)
    spec = SceneSpec(pairs=pairs, placements=tuple(cells[i] for i in idx))
    img, masks = render_scene(spec, vocab)
    if sigma > 0:
        img = np.clip(img + rng.normal(0, sigma, img.shape), -1, 1).astype(np.float32)
    return img, masks


def synthesize_dataset(config: SynthesisConfig, vocab: Vocabulary) -> list[LabeledExample]:
    """Over-generate, score, keep top-k, and greedily align masks to pairs."""
    out: list[LabeledExample] = []
    base = np.random.default_rng(config.seed).integers(0, 2**31, size=len(config.prompts))
    for p_idx, prompt in enumerate(config.prompts):
        parse = parse_prompt(prompt, vocab)
        candidates = []
        for k in range(config.k_gen):
            cand_seed = int(base[p_idx]) * 1000 + k
            img, masks = _render_candidate(parse, cand_seed, config.noise_sigma, vocab)
            score = binding_score(img, parse, vocab)
            candidates.append((score, k, img, masks))
        candidates.sort(key=lambda t: (-t[0], t[1]))
        for score, _, img, masks in candidates[: config.k_keep]:
            pairs = [(p.attr_token, p.obj_token) for p in parse.pairs]
            scores = np.array(
                [
                    [oracle_alignment(img, m, pr, vocab) for pr in pairs]
                    for m in masks
                ]
            )
            assign = greedy_assign(scores)
            aligned = np.zeros_like(masks)
            for mask_i, pair_j in assign.items():
                aligned[pair_j] = masks[mask_i]
            out.append(
                LabeledExample(
                    image=img.astype(np.float32),
                    tokens=parse.tokens,
                    parse=parse,
                    masks=aligned,
                    oracle_score=float(score),
                )
            )
    return out


def make_prompt_set(
    n_pairs: int,
    n_prompts: int,
    categories,
    vocab: Vocabulary,
    seed: int = 0,
    exclude: set[str] | None = None,
) -> list[str]:
    """Random canonical prompts with distinct objects, optionally avoiding a set."""
    exclude = exclude or set()
    prompts: list[str] = []
    seen = set(exclude)
    for s in range(100000):
        if len(prompts) >= n_prompts:
            break
        spec = sample_scene(seed * 100000 + s, n_pairs, categories, vocab)
        prompt = canonical_prompt(spec.pairs, vocab)
        if prompt not in seen:
            seen.add(prompt)
            prompts.append(prompt)
    return prompts


# -- binary record file ----------------------------------------------------


def _pack_example(ex: LabeledExample) -> bytes:
    c, h, w = ex.image.shape
    head = struct.pack(
        "<HHHHf",
        len(ex.tokens),
        len(ex.parse.pairs),
        h,
        w,
        ex.oracle_score,
    )
    toks = np.asarray(ex.tokens, dtype="<u2").tobytes()
    pair_idx = np.asarray(
        [(p.attr_index, p.obj_index) for p in ex.parse.pairs], dtype="<u2"
    ).tobytes()
    img = ex.image.astype("<f4").tobytes()
    masks = b"".join(np.packbits(m.astype(np.uint8)).tobytes() for m in ex.masks)
    return head + toks + pair_idx + img + masks


def save_dataset(examples: list[LabeledExample], path: str | Path) -> None:
    body = b"".join(_pack_example(ex) for ex in examples)
    blob = MAGIC + struct.pack("<II", VERSION, len(examples)) + body
    Path(path).write_bytes(blob)


def load_dataset(path: str | Path, vocab: Vocabulary) -> list[LabeledExample]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError("not a glyph dataset file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    off = 12
    out = []
    from .grammar import parse_pairs

    for _ in range(count):
        n_tok, n_pairs, h, w, score = struct.unpack_from("<HHHHf", blob, off)
        off += 12
        toks = np.frombuffer(blob, dtype="<u2", count=n_tok, offset=off)
        off += 2 * n_tok
        off += 4 * n_pairs  # pair indices are re-derived by parsing
        img = np.frombuffer(blob, dtype="<f4", count=CHANNELS * h * w, offset=off)
        img = img.reshape(CHANNELS, h, w).copy()
        off += 4 * CHANNELS * h * w
        masks = np.zeros((n_pairs, h, w), dtype=bool)
        nbytes = (h * w + 7) // 8
        for j in range(n_pairs):
            bits = np.unpackbits(
                np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=off)
            )[: h * w]
            masks[j] = bits.reshape(h, w).astype(bool)
            off += nbytes
        parse = parse_pairs(list(int(t) for t in toks), vocab)
        out.append(
            LabeledExample(
                image=img,
                tokens=tuple(int(t) for t in toks),
                parse=parse,
                masks=masks,
                oracle_score=float(score),
            )
        )
    return out


def dataset_manifest(
    examples: list[LabeledExample], path: str | Path, config: SynthesisConfig
) -> dict:
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return {
        "file": str(Path(path).name),
        "count": len(examples),
        "seed": config.seed,
        "k_gen": config.k_gen,
        "k_keep": config.k_keep,
        "noise_sigma": config.noise_sigma,
        "prompts": len(config.prompts),
        "sha256": digest,
    }


def write_manifest(manifest: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
