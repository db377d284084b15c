"""Build every checkpoint and report the acceptance tests read.

Run:  python3 demos/reproduce_reports.py [workdir]

Uses the default config and the cached pipeline, so re-running after an
interruption (or after `pytest`) only redoes missing stages.  Budget on
one CPU core: roughly 30 min for the base model, a few minutes each for
the encoder pretrain and the three fusion variants, and 30-45 min for
the evaluation reports.
"""

import sys
import time
from pathlib import Path

from protofuse.config import default_config
from protofuse.experiments import Pipeline

workdir = Path(sys.argv[1] if len(sys.argv) > 1 else "artifacts")
t_start = time.time()


def log(msg):
    print(f"[{time.time() - t_start:7.0f}s] {msg}", flush=True)


pipe = Pipeline(default_config(), workdir, log=log)

log("== stage: dataset ==")
pipe.dataset()
log("== stage: base model ==")
pipe.base()
log("== stage: image encoder ==")
pipe.phi()
log("== stage: reference images ==")
pipe.references()
for variant in ("full", "frozen", "color"):
    log(f"== stage: fusion ({variant}) ==")
    pipe.vsc(variant)
log("== stage: color-only dataset ==")
pipe.dataset("color")

for name in (
    "report_single_binding",
    "report_heldout_two",
    "report_scaling",
    "report_attention_iou",
    "report_transfer",
    "report_localization_ablation",
    "report_benchmark",
):
    log(f"== {name} ==")
    doc = getattr(pipe, name)()
    log(f"{name}: {doc if len(str(doc)) < 300 else 'written'}")

log(f"done; artifacts in {workdir}")
