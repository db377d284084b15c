"""Typed run configuration with defaults, validation, and content hashing.

Configs are JSON files with nested sections (world, model, vsc, train,
eval) plus a top-level master seed.  Unknown keys anywhere are rejected
so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path


class ParseError(ValueError):
    pass


class UnknownKey(ValueError):
    def __init__(self, section: str, key: str):
        super().__init__(f"unknown key {key!r} in section {section!r}")
        self.section = section
        self.key = key


class RangeError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "world": {
        "categories": ["color", "texture", "shape"],
        "n_prompts_single": 60,
        "n_prompts_multi": 120,
        "k_gen": 10,
        "k_keep": 3,
        "noise_sigma": 0.02,
    },
    "model": {
        "d": 64,
        "d_attn": 64,
        "channels": [32, 64],
        "T": 200,
        "n_max": 32,
        "mixing": 1.0,
        "schedule": "linear",
    },
    "train": {
        "steps": 6000,
        "batch_size": 16,
        "lr": 1e-3,
    },
    "vsc": {
        "lambda_loc": 0.1,
        "n_refs": 3,
        "proj_dim": 32,
        "steps": 1500,
        "batch_size": 8,
        "lr": 1e-3,
        "train_phi_tail": True,
    },
    "eval": {
        "n_seeds": 100,
        "ddim_steps": 50,
        "invert_t": 20,
    },
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    world: dict
    model: dict
    train: dict
    vsc: dict
    eval: dict

    def content_hash(self) -> str:
        """SHA-256 over the canonical JSON form; covers every field."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "world": self.world,
            "model": self.model,
            "train": self.train,
            "vsc": self.vsc,
            "eval": self.eval,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _merge_section(name: str, given: dict, defaults: dict) -> dict:
    if not isinstance(given, dict):
        raise ParseError(f"section {name!r} must be an object")
    for key in given:
        if key not in defaults:
            raise UnknownKey(name, key)
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


def _validate(cfg: RunConfig) -> None:
    if cfg.vsc["lambda_loc"] < 0:
        raise RangeError(f"vsc.lambda_loc must be >= 0, got {cfg.vsc['lambda_loc']}")
    if cfg.vsc["n_refs"] < 1:
        raise RangeError("vsc.n_refs must be >= 1")
    if cfg.model["T"] < 2:
        raise RangeError("model.T must be >= 2")
    if cfg.eval["ddim_steps"] < 1 or cfg.eval["ddim_steps"] > cfg.model["T"]:
        raise RangeError("eval.ddim_steps must be in [1, model.T]")
    for key in ("k_gen", "k_keep"):
        if cfg.world[key] < 1:
            raise RangeError(f"world.{key} must be >= 1")
    if cfg.model["schedule"] not in ("linear", "cosine"):
        raise RangeError(f"unknown schedule {cfg.model['schedule']!r}")
    bad = set(cfg.world["categories"]) - {"color", "texture", "shape"}
    if bad:
        raise RangeError(f"unknown categories {sorted(bad)}")


def from_dict(doc: dict) -> RunConfig:
    """Validated config with defaults filled in."""
    if not isinstance(doc, dict):
        raise ParseError("config root must be an object")
    for key in doc:
        if key not in DEFAULTS:
            raise UnknownKey("<root>", key)
    sections = {}
    for name in ("world", "model", "train", "vsc", "eval"):
        sections[name] = _merge_section(name, doc.get(name, {}), DEFAULTS[name])
    seed = doc.get("seed", DEFAULTS["seed"])
    if not isinstance(seed, int):
        raise ParseError("seed must be an integer")
    cfg = RunConfig(seed=seed, **sections)
    _validate(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ParseError(f"cannot read config {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON in {path}: {e}") from e
    return from_dict(doc)


def default_config() -> RunConfig:
    return from_dict({})
