"""Command-line surface tying the stages together.

Every subcommand reads a RunConfig (JSON; defaults when omitted), runs
one stage, and writes a run manifest recording the config hash, master
seed, git-describe string, and output paths.  Exit codes: 0 success,
1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from pathlib import Path

SUBCOMMANDS = (
    "gen-data",
    "train-base",
    "train-vsc",
    "sample",
    "eval",
    "scale-pairs",
    "sweep",
    "bench",
    "visualize-attn",
)


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protofuse",
        description="compositional glyph generation: data, training, evaluation",
    )
    parser.add_argument("--config", help="JSON run config (defaults when omitted)")
    parser.add_argument("--workdir", default="runs", help="artifact directory")
    parser.add_argument("--threads", type=int, help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("gen-data", help="synthesize the labeled training set")
    sub.add_parser("train-base", help="train the base diffusion model")
    p = sub.add_parser("train-vsc", help="train the fusion stage on the frozen base")
    p.add_argument("--variant", default="full", choices=("full", "color", "frozen"))

    p = sub.add_parser("sample", help="generate one image from a prompt")
    p.add_argument("--prompt", required=True)
    p.add_argument("--ckpt", required=True, help="base or fusion checkpoint")
    p.add_argument("--base", help="base checkpoint when --ckpt is a fusion one")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="sample.png")
    p.add_argument("--steps", type=int, default=50)

    p = sub.add_parser("eval", help="run an evaluation suite")
    p.add_argument(
        "--suite", default="heldout",
        choices=("single", "heldout", "color", "texture", "shape", "hm"),
    )

    sub.add_parser("scale-pairs", help="accuracy vs number of binding pairs")

    p = sub.add_parser("sweep", help="ablation sweep along one axis")
    p.add_argument(
        "--axis", required=True,
        choices=("dataset_size", "category_transfer", "encoder_freeze", "lambda"),
    )
    p.add_argument("--grid", help="comma-separated grid values")

    sub.add_parser("bench", help="inference timing and sampler-call accounting")

    p = sub.add_parser("visualize-attn", help="export token attention maps as a grid")
    p.add_argument("--prompt", required=True)
    p.add_argument("--model", default="base", choices=("base", "vsc"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="attn.png")
    return parser


def _write_run_manifest(workdir: Path, command: str, cfg, outputs: list[str]) -> Path:
    doc = {
        "command": command,
        "config_hash": cfg.content_hash(),
        "seed": cfg.seed,
        "git": _git_describe(),
        "outputs": outputs,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = workdir / f"run_{command.replace('-', '_')}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def _cmd_sample(args, cfg, workdir: Path) -> list[str]:
    import numpy as np

    from .persistence import export_image, load_tensors
    from .training import load_bundle
    from .vocab import default_vocabulary

    _, meta = load_tensors(args.ckpt)
    vocab = default_vocabulary()
    if meta.get("kind") == "vsc":
        from .vsc import load_vsc, vsc_generate

        base_path = args.base or str(Path(args.ckpt).parent / "base.vsck")
        bundle = load_bundle(base_path)
        vsc = load_vsc(args.ckpt, bundle)
        cache = os.environ.get("VSC_CACHE_DIR") or str(workdir / "refcache")
        img = vsc_generate(
            args.prompt, vsc, bundle, vocab,
            m=cfg.vsc["n_refs"], seed=args.seed, cache_dir=cache, n_steps=args.steps,
        )
    else:
        from . import autodiff as ad
        from .grammar import parse_prompt
        from .nn import DTYPE
        from .sampler import ddim_sample

        bundle = load_bundle(args.ckpt)
        parse = parse_prompt(args.prompt, vocab)
        with ad.no_grad():
            c = bundle.text.encode(parse.tokens).data
        z = np.random.default_rng(args.seed).standard_normal((1, 3, 32, 32)).astype(DTYPE)
        imgs, _ = ddim_sample(
            bundle.denoiser, bundle.sched, c[None], n_steps=args.steps, z_init=z
        )
        img = imgs[0]
    export_image(img, args.out)
    return [args.out]


def _cmd_eval(args, cfg, pipe) -> list[str]:
    from .harness import EvalReport, category_accuracy, write_csv, write_json

    reports = pipe.dir / "reports"
    if args.suite == "single":
        pipe.report_single_binding()
        return [str(reports / "single_binding.json"), str(reports / "single_binding.csv")]
    if args.suite == "heldout":
        pipe.report_heldout_two()
        return [str(reports / "heldout_two.json"), str(reports / "heldout_two.csv")]
    if args.suite in ("color", "texture", "shape"):
        prompts = pipe.prompts.by_category[args.suite]
        rows, summary = [], {}
        for sampler in (pipe.base_sampler(), pipe.vsc_sampler()):
            mean, per_prompt, records = category_accuracy(
                sampler, prompts, pipe.vocab, n_seeds=25, master_seed=cfg.seed + 50
            )
            summary[sampler.name] = {"mean": mean, "per_prompt": per_prompt}
            rows.extend(records)
        write_csv(rows, reports / f"eval_{args.suite}.csv")
        write_json(summary, reports / f"eval_{args.suite}.json")
        return [str(reports / f"eval_{args.suite}.json"), str(reports / f"eval_{args.suite}.csv")]
    # hm: full three-category report for the fused model
    sampler = pipe.vsc_sampler()
    scores, per_prompt, rows = {}, {}, []
    for cat in ("color", "texture", "shape"):
        mean, pp, records = category_accuracy(
            sampler, pipe.prompts.by_category[cat], pipe.vocab,
            n_seeds=25, master_seed=cfg.seed + 50,
        )
        scores[cat] = mean
        per_prompt.update(pp)
        rows.extend(records)
    report = EvalReport.build(
        scores["color"], scores["texture"], scores["shape"],
        per_prompt, 25, cfg.content_hash(),
    )
    write_json(report.to_dict(), reports / "eval_hm.json")
    write_csv(rows, reports / "eval_hm.csv")
    return [str(reports / "eval_hm.json"), str(reports / "eval_hm.csv")]


def _cmd_visualize(args, cfg, pipe) -> list[str]:
    import numpy as np

    from .grammar import parse_prompt
    from .harness import inverted_attention
    from .persistence import export_image

    sampler = pipe.base_sampler() if args.model == "base" else pipe.vsc_sampler()
    imgs = sampler.generate(args.prompt, [args.seed])
    c = sampler.conditioning(args.prompt)
    bundle = pipe.base()
    attn = inverted_attention(
        bundle, imgs[0], c, invert_t=cfg.eval["invert_t"], n_steps=cfg.eval["ddim_steps"]
    )
    parse = parse_prompt(args.prompt, pipe.vocab)
    # grid: one row per token, one column per attention layer, upsampled to 32
    n_tok = len(parse.tokens)
    cell = 32
    grid = np.full((3, n_tok * (cell + 2), len(attn) * (cell + 2)), -1.0, dtype=np.float32)
    for li, a in enumerate(attn):
        data = a.data[0]
        side = int(round(np.sqrt(data.shape[0])))
        for ti in range(n_tok):
            m = data[:, ti].reshape(side, side)
            m = (m - m.min()) / (m.max() - m.min() + 1e-12)
            up = np.kron(m, np.ones((cell // side, cell // side)))
            r, c0 = ti * (cell + 2), li * (cell + 2)
            grid[:, r : r + cell, c0 : c0 + cell] = (2.0 * up - 1.0)[None]
    export_image(grid, args.out)
    img_out = str(Path(args.out).with_suffix("")) + "_sample.png"
    export_image(imgs[0], img_out)
    return [args.out, img_out]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    if args.threads:
        os.environ["OPENBLAS_NUM_THREADS"] = str(args.threads)
        os.environ["OMP_NUM_THREADS"] = str(args.threads)

    from .config import ParseError, RangeError, UnknownKey, default_config, load_config

    try:
        cfg = load_config(args.config) if args.config else default_config()
    except (ParseError, UnknownKey, RangeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1

    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    try:
        from .experiments import Pipeline, sweep_experiment

        pipe = Pipeline(cfg, workdir, log=lambda m: print(m, flush=True))
        if args.command == "gen-data":
            pipe.dataset()
            outputs = [str(workdir / "dataset.bin")]
        elif args.command == "train-base":
            pipe.base()
            outputs = [str(workdir / "base.vsck")]
        elif args.command == "train-vsc":
            pipe.vsc(args.variant)
            name = "vsc" if args.variant == "full" else f"vsc_{args.variant}"
            outputs = [str(workdir / f"{name}.vsck")]
        elif args.command == "sample":
            outputs = _cmd_sample(args, cfg, workdir)
        elif args.command == "eval":
            outputs = _cmd_eval(args, cfg, pipe)
        elif args.command == "scale-pairs":
            pipe.report_scaling()
            outputs = [str(workdir / "reports" / "scaling.json")]
        elif args.command == "sweep":
            grid = [float(g) for g in args.grid.split(",")] if args.grid else None
            sweep_experiment(args.axis, cfg, workdir, grid=grid, log=pipe.log)
            outputs = [str(workdir / "reports" / f"sweep_{args.axis}.json")]
        elif args.command == "bench":
            pipe.report_benchmark()
            outputs = [str(workdir / "reports" / "benchmark.json")]
        else:  # visualize-attn
            outputs = _cmd_visualize(args, cfg, pipe)
        manifest = _write_run_manifest(workdir, args.command, cfg, outputs)
        print(f"wrote {', '.join(outputs)} (manifest {manifest})")
        return 0
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # anything unexpected is a runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
