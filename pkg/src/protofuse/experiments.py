"""Cached experiment pipeline: datasets, training runs, and reports.

Every stage writes its artifact plus a manifest (config hash, seed,
output content hashes, wall time).  A stage is skipped when its artifact
exists and the manifest's config hash matches, so the full pipeline is
resumable and each product is reproducible bit-exactly from its
manifest.
"""

from __future__ import annotations

import json
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataset import (
    SynthesisConfig,
    dataset_manifest,
    load_dataset,
    make_prompt_set,
    save_dataset,
    synthesize_dataset,
)
from .fusion import ImageEncoder, pretrain_image_encoder
from .grammar import parse_prompt
from .harness import (
    BaseSampler,
    VSCSampler,
    attention_iou,
    category_accuracy,
    inference_benchmark,
    inverted_attention,
    prompt_seeds,
    scaling_pairs_experiment,
    sign_test,
    write_csv,
    write_json,
)
from .oracle import binding_score
from .persistence import file_hash, load_tensors, save_tensors
from .training import ModelBundle, load_bundle, make_model, save_bundle, train_base
from .vocab import Category, Vocabulary, default_vocabulary
from .vsc import VSCModel, generate_references, load_vsc, save_vsc, train_vsc

def with_overrides(cfg: RunConfig, **sections) -> RunConfig:
    """Derived config: replace named keys inside sections (or 'seed')."""
    from .config import from_dict

    doc = json.loads(cfg.to_json())
    for name, updates in sections.items():
        if name == "seed":
            doc["seed"] = updates
        else:
            doc[name].update(updates)
    return from_dict(doc)


CATEGORY_BY_NAME = {
    "color": Category.ATTR_COLOR,
    "texture": Category.ATTR_TEXTURE,
    "shape": Category.ATTR_SHAPE,
}


@dataclass
class PromptSets:
    """All prompt collections derived deterministically from the config."""

    train: list[str]  # mixed 1- and 2-pair training prompts
    eval_single: list[str]  # single-pair competence check
    heldout_two: list[str]  # 2-pair prompts absent from training
    by_category: dict[str, list[str]]  # 2-pair, one attribute category each
    scaling: dict[int, list[str]]  # n_pairs -> prompts


def build_prompt_sets(cfg: RunConfig, vocab: Vocabulary) -> PromptSets:
    cats = tuple(CATEGORY_BY_NAME[c] for c in cfg.world["categories"])
    seed = cfg.seed
    single = make_prompt_set(1, cfg.world["n_prompts_single"], cats, vocab, seed=seed)
    multi = make_prompt_set(2, cfg.world["n_prompts_multi"], cats, vocab, seed=seed + 1)
    train = single + multi
    eval_single = make_prompt_set(1, 6, cats, vocab, seed=seed + 2)
    heldout = make_prompt_set(
        2, 10, cats, vocab, seed=seed + 3, exclude=set(multi)
    )
    by_category = {
        name: make_prompt_set(2, 8, (cat,), vocab, seed=seed + 4)
        for name, cat in CATEGORY_BY_NAME.items()
    }
    scaling = {
        n: make_prompt_set(n, 5, cats, vocab, seed=seed + 10 + n) for n in (2, 3, 4, 5)
    }
    return PromptSets(
        train=train,
        eval_single=eval_single,
        heldout_two=heldout,
        by_category=by_category,
        scaling=scaling,
    )


def color_only_prompts(cfg: RunConfig, vocab: Vocabulary) -> list[str]:
    cats = (Category.ATTR_COLOR,)
    single = make_prompt_set(1, cfg.world["n_prompts_single"], cats, vocab, seed=cfg.seed)
    multi = make_prompt_set(2, cfg.world["n_prompts_multi"], cats, vocab, seed=cfg.seed + 1)
    return single + multi


class Pipeline:
    """Stage runner bound to one config and one working directory."""

    def __init__(self, cfg: RunConfig, workdir: str | Path, log=None):
        self.cfg = cfg
        self.dir = Path(workdir)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "reports").mkdir(exist_ok=True)
        self.log = log or (lambda msg: None)
        self.vocab = default_vocabulary()
        self.prompts = build_prompt_sets(cfg, self.vocab)
        self._bundle: ModelBundle | None = None
        self._phi: ImageEncoder | None = None

    # -- manifest helpers --------------------------------------------------

    def _manifest_path(self, stage: str) -> Path:
        return self.dir / f"{stage}.manifest.json"

    def _fresh(self, stage: str, outputs: list[Path]) -> bool:
        mp = self._manifest_path(stage)
        if not mp.exists() or not all(p.exists() for p in outputs):
            return False
        try:
            doc = json.loads(mp.read_text())
        except json.JSONDecodeError:
            return False
        return doc.get("config_hash") == self.cfg.content_hash()

    def _write_manifest(self, stage: str, outputs: list[Path], t0: float, extra: dict | None = None):
        doc = {
            "stage": stage,
            "config_hash": self.cfg.content_hash(),
            "seed": self.cfg.seed,
            "outputs": {p.name: file_hash(p) for p in outputs},
            "wall_time": time.time() - t0,
            **(extra or {}),
        }
        self._manifest_path(stage).write_text(json.dumps(doc, indent=2, sort_keys=True))

    # -- stages ------------------------------------------------------------

    def dataset(self, variant: str = "full"):
        """Labeled training scenes; the color variant restricts attributes."""
        name = "dataset" if variant == "full" else f"dataset_{variant}"
        path = self.dir / f"{name}.bin"
        if self._fresh(name, [path]):
            return load_dataset(path, self.vocab)
        t0 = time.time()
        prompts = (
            self.prompts.train if variant == "full" else color_only_prompts(self.cfg, self.vocab)
        )
        syn = SynthesisConfig(
            prompts=prompts,
            k_gen=self.cfg.world["k_gen"],
            k_keep=self.cfg.world["k_keep"],
            noise_sigma=self.cfg.world["noise_sigma"],
            seed=self.cfg.seed,
        )
        examples = synthesize_dataset(syn, self.vocab)
        save_dataset(examples, path)
        self._write_manifest(name, [path], t0, {"dataset": dataset_manifest(examples, path, syn)})
        self.log(f"{name}: {len(examples)} examples")
        return examples

    def base(self) -> ModelBundle:
        path = self.dir / "base.vsck"
        if self._bundle is not None:
            return self._bundle
        if self._fresh("base", [path]):
            self._bundle = load_bundle(path)
            return self._bundle
        t0 = time.time()
        examples = self.dataset()
        m = self.cfg.model
        model = make_model(
            len(self.vocab), d=m["d"], d_attn=m["d_attn"], channels=tuple(m["channels"]),
            T=m["T"], n_max=m["n_max"], mixing=m["mixing"], schedule_kind=m["schedule"],
            seed=self.cfg.seed,
        )
        history = train_base(
            model, examples, steps=self.cfg.train["steps"],
            batch_size=self.cfg.train["batch_size"], lr=self.cfg.train["lr"],
            seed=self.cfg.seed, log=self.log,
        )
        save_bundle(model, path)
        hist_path = self.dir / "base_history.json"
        write_json(history, hist_path)
        self._write_manifest("base", [path, hist_path], t0)
        self._bundle = model
        return model

    def phi(self) -> ImageEncoder:
        path = self.dir / "phi.vsck"
        if self._phi is not None:
            return self._phi
        enc = ImageEncoder(out_dim=128, seed=self.cfg.seed + 7)
        if self._fresh("phi", [path]):
            tensors, _ = load_tensors(path)
            enc.load_state(tensors)
            self._phi = enc
            return enc
        t0 = time.time()
        pretrain_image_encoder(enc, self.vocab, seed=self.cfg.seed + 7, log=self.log)
        save_tensors({k: v.data for k, v in enc.named_params().items()}, path, meta={"kind": "phi"})
        self._write_manifest("phi", [path], t0)
        self._phi = enc
        return enc

    @property
    def ref_cache(self) -> Path:
        return self.dir / "refcache"

    def references(self):
        """Reference images for every (attribute, object) pair in the vocab."""
        bundle = self.base()
        pairs = [
            (a, o)
            for a in self.vocab.attr_ids()
            for o in self.vocab.ids_in(Category.OBJECT)
        ]
        return generate_references(
            pairs, self.cfg.vsc["n_refs"], bundle, self.vocab,
            cache_dir=self.ref_cache, n_steps=self.cfg.eval["ddim_steps"],
        )

    def vsc(self, variant: str = "full") -> tuple[VSCModel, list[dict]]:
        """Fusion training; variants: full, color (color-only data), frozen
        (image-encoder tail not trainable)."""
        name = "vsc" if variant == "full" else f"vsc_{variant}"
        path = self.dir / f"{name}.vsck"
        hist_path = self.dir / f"{name}_history.json"
        bundle = self.base()
        if self._fresh(name, [path, hist_path]):
            return load_vsc(path, bundle), json.loads(hist_path.read_text())
        t0 = time.time()
        examples = self.dataset("color" if variant == "color" else "full")
        enc = self.phi()
        vsc = VSCModel.create(
            d=self.cfg.model["d"], D=enc.out_dim, lam=self.cfg.vsc["lambda_loc"],
            seed=self.cfg.seed + 11,
        )
        vsc.phi.load_state({k: v.data for k, v in enc.named_params().items()})
        refs = self.references()
        history = train_vsc(
            vsc, bundle, examples, refs, self.vocab,
            steps=self.cfg.vsc["steps"], batch_size=self.cfg.vsc["batch_size"],
            lr=self.cfg.vsc["lr"], seed=self.cfg.seed + 12,
            phi_tail_trainable=(variant != "frozen") and self.cfg.vsc["train_phi_tail"],
            log=self.log,
        )
        save_vsc(vsc, bundle, path)
        write_json(history, hist_path)
        self._write_manifest(name, [path, hist_path], t0)
        return vsc, history

    # -- samplers ----------------------------------------------------------

    def base_sampler(self) -> BaseSampler:
        return BaseSampler(self.base(), self.vocab, n_steps=self.cfg.eval["ddim_steps"])

    def vsc_sampler(self, variant: str = "full") -> VSCSampler:
        vsc, _ = self.vsc(variant)
        s = VSCSampler(
            vsc, self.base(), self.vocab, m=self.cfg.vsc["n_refs"],
            cache_dir=self.ref_cache, n_steps=self.cfg.eval["ddim_steps"],
        )
        if variant != "full":
            s.name = f"vsc_{variant}"
        return s

    # -- reports -----------------------------------------------------------

    def _report(self, name: str, build) -> dict:
        path = self.dir / "reports" / f"{name}.json"
        if self._fresh(f"report_{name}", [path]):
            return json.loads(path.read_text())
        t0 = time.time()
        doc = build()
        write_json(doc, path)
        self._write_manifest(f"report_{name}", [path], t0)
        return doc

    def report_single_binding(self) -> dict:
        """Mean binding score per single-pair prompt, 100 seeds each."""

        def build():
            sampler = self.base_sampler()
            mean, per_prompt, records = category_accuracy(
                sampler, self.prompts.eval_single, self.vocab,
                n_seeds=self.cfg.eval["n_seeds"], master_seed=self.cfg.seed,
            )
            write_csv(records, self.dir / "reports" / "single_binding.csv")
            return {"mean": mean, "per_prompt": per_prompt, "n_seeds": self.cfg.eval["n_seeds"]}

        return self._report("single_binding", build)

    def report_heldout_two(self) -> dict:
        """Paired base-vs-fused comparison on held-out 2-pair prompts."""

        def build():
            n_seeds = 20  # 10 prompts x 20 seeds = 200 paired samples
            base = self.base_sampler()
            vsc = self.vsc_sampler()
            out = {}
            rows = []
            per_sample = {}
            for sampler in (base, vsc):
                mean, per_prompt, records = category_accuracy(
                    sampler, self.prompts.heldout_two, self.vocab,
                    n_seeds=n_seeds, master_seed=self.cfg.seed + 20,
                )
                out[sampler.name] = {"mean": mean, "per_prompt": per_prompt}
                per_sample[sampler.name] = [r["score"] for r in records]
                rows.extend(records)
            write_csv(rows, self.dir / "reports" / "heldout_two.csv")
            diffs = [
                v - b for v, b in zip(per_sample["vsc"], per_sample["base"])
            ]
            out["diff_mean"] = float(np.mean(diffs))
            out["sign_test"] = sign_test(diffs, alpha=0.01)
            out["n_samples"] = len(diffs)
            return out

        return self._report("heldout_two", build)

    def report_scaling(self) -> dict:
        def build():
            table = scaling_pairs_experiment(
                [self.base_sampler(), self.vsc_sampler()],
                self.prompts.scaling, self.vocab, n_seeds=10,
                master_seed=self.cfg.seed + 30,
            )
            rows = [
                {"model": r.model, "n_pairs": r.n_pairs,
                 "mean_score": r.mean_score, "wall_time": r.wall_time}
                for r in table.rows
            ]
            write_csv(rows, self.dir / "reports" / "scaling.csv")
            return {"rows": rows}

        return self._report("scaling", build)

    def report_attention_iou(self) -> dict:
        """IoU on a fixed set of 50 correctly-bound scenes via inversion."""

        def build():
            from .render import render_scene, sample_scene

            cats = tuple(CATEGORY_BY_NAME[c] for c in self.cfg.world["categories"])
            bundle = self.base()
            base = self.base_sampler()
            vsc = self.vsc_sampler()
            per_model: dict[str, list[float]] = {"base": [], "vsc": []}
            invert_t = self.cfg.eval["invert_t"]
            n_scenes = 50
            for i in range(n_scenes):
                spec = sample_scene(self.cfg.seed * 555 + i, 2, cats, self.vocab)
                img, masks = render_scene(spec, self.vocab)
                from .grammar import canonical_prompt

                prompt = canonical_prompt(spec.pairs, self.vocab)
                parse = parse_prompt(prompt, self.vocab)
                for sampler, key in ((base, "base"), (vsc, "vsc")):
                    c = sampler.conditioning(prompt)
                    attn = inverted_attention(
                        bundle, img, c, invert_t=invert_t,
                        n_steps=self.cfg.eval["ddim_steps"],
                    )
                    ious = attention_iou(attn, parse, masks)
                    per_model[key].append(float(np.mean(ious)))
            rows = [
                {"scene": i, "base_iou": per_model["base"][i], "vsc_iou": per_model["vsc"][i]}
                for i in range(n_scenes)
            ]
            write_csv(rows, self.dir / "reports" / "attention_iou.csv")
            return {
                "base_mean": float(np.mean(per_model["base"])),
                "vsc_mean": float(np.mean(per_model["vsc"])),
                "n_scenes": n_scenes,
                "invert_t": invert_t,
            }

        return self._report("attention_iou", build)

    def report_transfer(self) -> dict:
        """Color-only-trained fusion evaluated on texture and shape."""

        def build():
            base = self.base_sampler()
            vsc = self.vsc_sampler("color")
            out = {}
            rows = []
            for cat in ("texture", "shape"):
                prompts = self.prompts.by_category[cat]
                for sampler in (base, vsc):
                    mean, per_prompt, records = category_accuracy(
                        sampler, prompts, self.vocab, n_seeds=25,
                        master_seed=self.cfg.seed + 40,
                    )
                    out.setdefault(cat, {})[sampler.name] = mean
                    for r in records:
                        r["category"] = cat
                    rows.extend(records)
            write_csv(rows, self.dir / "reports" / "transfer.csv")
            return out

        return self._report("transfer", build)

    def report_localization_ablation(self) -> dict:
        """Final L_loc with trainable vs frozen encoder tail."""

        def build():
            _, hist_full = self.vsc("full")
            _, hist_frozen = self.vsc("frozen")

            def tail_mean(hist, frac=0.1):
                k = max(1, int(len(hist) * frac))
                return float(np.mean([h["l_loc"] for h in hist[-k:]]))

            third = len(hist_frozen) // 3
            frozen_after_third = [h["l_loc"] for h in hist_frozen[third:]]
            return {
                "final_l_loc_trainable": tail_mean(hist_full),
                "final_l_loc_frozen": tail_mean(hist_frozen),
                "frozen_after_third_mean_first_half": float(
                    np.mean(frozen_after_third[: len(frozen_after_third) // 2])
                ),
                "frozen_after_third_mean_second_half": float(
                    np.mean(frozen_after_third[len(frozen_after_third) // 2 :])
                ),
            }

        return self._report("localization_ablation", build)

    def report_benchmark(self) -> dict:
        def build():
            def clear_cache():
                if self.ref_cache.exists():
                    shutil.rmtree(self.ref_cache)

            rows = inference_benchmark(
                [self.base_sampler(), self.vsc_sampler()],
                self.prompts.scaling, self.vocab, repeats=3,
                clear_cache=clear_cache,
            )
            write_csv(
                [{k: v for k, v in r.items() if not isinstance(v, list)} for r in rows],
                self.dir / "reports" / "benchmark.csv",
            )
            # restore the shared cache for later stages
            self.references()
            return {"rows": rows}

        return self._report("benchmark", build)

SWEEP_AXES = ("dataset_size", "category_transfer", "encoder_freeze", "lambda")

DEFAULT_GRIDS = {
    "dataset_size": [30, 60, 120, 240],  # 2-pair training prompts per point
    "lambda": [0.0, 0.05, 0.1, 0.2],
}


def sweep_experiment(
    axis: str, cfg: RunConfig, workdir: str | Path, grid=None, log=None, eval_seeds: int = 10
) -> dict:
    """One training run per grid point with shared seeds; CSV + summary.

    dataset_size and lambda retrain the fusion stage per point in a
    subdirectory; category_transfer and encoder_freeze reuse the named
    pipeline reports.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    workdir = Path(workdir)
    root = Pipeline(cfg, workdir, log=log)
    if axis == "category_transfer":
        summary = {"axis": axis, "result": root.report_transfer()}
    elif axis == "encoder_freeze":
        summary = {"axis": axis, "result": root.report_localization_ablation()}
    else:
        grid = grid if grid is not None else DEFAULT_GRIDS[axis]
        rows = []
        for value in grid:
            if axis == "dataset_size":
                sub = with_overrides(cfg, world={"n_prompts_multi": int(value)})
            else:
                sub = with_overrides(cfg, vsc={"lambda_loc": float(value)})
            pipe = Pipeline(sub, workdir / f"{axis}_{value}", log=log)
            # reuse the root base model and encoder: the sweep varies only
            # the fusion stage, and retraining the base per point would
            # change the comparison as well as the cost
            _share_base(root, pipe)
            sampler = pipe.vsc_sampler()
            mean, _, _ = category_accuracy(
                sampler, pipe.prompts.heldout_two, pipe.vocab,
                n_seeds=eval_seeds, master_seed=cfg.seed + 60,
            )
            rows.append({"axis": axis, "value": value, "accuracy": mean})
            if log:
                log(f"sweep {axis}={value}: accuracy {mean:.3f}")
        write_csv(rows, workdir / "reports" / f"sweep_{axis}.csv")
        summary = {"axis": axis, "rows": rows}
    write_json(summary, workdir / "reports" / f"sweep_{axis}.json")
    return summary


def _share_base(root: "Pipeline", pipe: "Pipeline") -> None:
    """Copy base/phi artifacts so a sweep point skips those stages."""
    root.base()
    root.phi()
    for stem in ("base.vsck", "base_history.json", "phi.vsck"):
        src, dst = root.dir / stem, pipe.dir / stem
        if src.exists() and not dst.exists():
            shutil.copy2(src, dst)
    for stage in ("base", "phi"):
        mp = root._manifest_path(stage)
        doc = json.loads(mp.read_text())
        doc["config_hash"] = pipe.cfg.content_hash()
        pipe._manifest_path(stage).write_text(json.dumps(doc, indent=2, sort_keys=True))
