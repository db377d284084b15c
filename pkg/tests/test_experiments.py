import json

import pytest

from protofuse.config import from_dict
from protofuse.experiments import (
    Pipeline,
    build_prompt_sets,
    sweep_experiment,
    with_overrides,
)
from protofuse.persistence import file_hash
from protofuse.vocab import default_vocabulary

TINY = {
    "seed": 0,
    "world": {"n_prompts_single": 3, "n_prompts_multi": 3, "k_gen": 2, "k_keep": 1},
    "model": {"d": 16, "d_attn": 16, "channels": [8, 16], "T": 20},
    "train": {"steps": 3, "batch_size": 4},
    "vsc": {"steps": 2, "batch_size": 2, "n_refs": 1},
    "eval": {"n_seeds": 2, "ddim_steps": 4, "invert_t": 3},
}


@pytest.fixture(scope="module")
def pipe(tmp_path_factory):
    return Pipeline(from_dict(TINY), tmp_path_factory.mktemp("work"))


def test_prompt_sets_disjoint():
    cfg = from_dict(TINY)
    sets = build_prompt_sets(cfg, default_vocabulary())
    assert not set(sets.heldout_two) & set(sets.train)
    assert set(sets.scaling) == {2, 3, 4, 5}
    for n, prompts in sets.scaling.items():
        assert all(p.count(" a ") + 1 == n for p in prompts)


def test_with_overrides():
    cfg = from_dict(TINY)
    c2 = with_overrides(cfg, vsc={"lambda_loc": 0.5}, seed=9)
    assert c2.vsc["lambda_loc"] == 0.5
    assert c2.seed == 9
    assert c2.model == cfg.model
    assert c2.content_hash() != cfg.content_hash()


def test_dataset_stage_cached_and_reproducible(pipe):
    examples = pipe.dataset()
    h1 = file_hash(pipe.dir / "dataset.bin")
    again = pipe.dataset()  # cached: loads, does not rebuild
    assert len(again) == len(examples)
    # force a rebuild; the artifact must be bit-identical
    (pipe.dir / "dataset.manifest.json").unlink()
    pipe.dataset()
    assert file_hash(pipe.dir / "dataset.bin") == h1


def test_base_stage_writes_manifest(pipe):
    pipe.base()
    doc = json.loads((pipe.dir / "base.manifest.json").read_text())
    assert doc["config_hash"] == pipe.cfg.content_hash()
    assert "base.vsck" in doc["outputs"]


def test_stale_manifest_triggers_rebuild(tmp_path):
    cfg = from_dict(TINY)
    p1 = Pipeline(cfg, tmp_path)
    p1.dataset()
    changed = with_overrides(cfg, world={"noise_sigma": 0.03})
    p2 = Pipeline(changed, tmp_path)
    assert not p2._fresh("dataset", [tmp_path / "dataset.bin"])


def test_vsc_stage_and_history(pipe):
    vsc, history = pipe.vsc()
    assert (pipe.dir / "vsc.vsck").exists()
    assert len(history) == TINY["vsc"]["steps"]
    # cached second call returns identical parameters
    vsc2, _ = pipe.vsc()
    for k, v in vsc.named_params().items():
        assert vsc2.named_params()[k].data.tobytes() == v.data.tobytes()


def test_sweep_lambda_tiny(pipe):
    summary = sweep_experiment(
        "lambda", pipe.cfg, pipe.dir, grid=[0.0, 0.1], eval_seeds=1
    )
    assert [r["value"] for r in summary["rows"]] == [0.0, 0.1]
    assert (pipe.dir / "reports" / "sweep_lambda.csv").exists()
    assert (pipe.dir / "reports" / "sweep_lambda.json").exists()


def test_sweep_unknown_axis(pipe):
    with pytest.raises(ValueError):
        sweep_experiment("nonsense", pipe.cfg, pipe.dir)
