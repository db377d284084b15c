"""End-to-end acceptance suite.

Criteria 1-6 and 14 are self-contained property checks.  Criteria 7-13
read the experiment pipeline bound to the committed `artifacts/`
directory; every stage there is cached behind a config-hash manifest, so
a complete artifacts tree makes them fast while a missing stage simply
retrains (base training fits in the CPU budget).
"""

import json
from pathlib import Path

import numpy as np
import pytest

from protofuse import autodiff as ad
from protofuse.autodiff import Tensor, grad_check
from protofuse.config import default_config
from protofuse.dataset import SynthesisConfig, make_prompt_set, synthesize_dataset
from protofuse.denoiser import noise_loss
from protofuse.experiments import Pipeline
from protofuse.fusion import (
    FusionMLP,
    fuse_embeddings,
    localization_loss,
    total_loss,
)
from protofuse.grammar import parse_prompt
from protofuse.harness import harmonic_mean, sign_test
from protofuse.nn import DTYPE
from protofuse.persistence import load_tensors, save_tensors
from protofuse.schedule import forward_diffuse
from protofuse.training import load_bundle, make_model, save_bundle
from protofuse.vocab import ATTR_CATEGORIES, default_vocabulary
from protofuse.vsc import ReferenceSet, VSCModel, train_vsc

VOCAB = default_vocabulary()
ARTIFACTS = Path(__file__).resolve().parent.parent / "artifacts"


@pytest.fixture(scope="module")
def pipe():
    return Pipeline(default_config(), ARTIFACTS)


# -- 1: metric arithmetic ---------------------------------------------------


def test_01_harmonic_mean_values():
    assert harmonic_mean(0.66, 0.61, 0.47) == pytest.approx(0.568, abs=1e-3)
    for v in (0.25, 0.5, 1.0):
        assert harmonic_mean(v, v, v) == v


# -- 2: localization-loss closed forms --------------------------------------


def _loss_inputs(side, n_tok, parse_text):
    parse = parse_prompt(parse_text, VOCAB)
    return parse, side * side


def test_02_loss_closed_forms():
    parse = parse_prompt("a red car", VOCAB)
    side, n_tok = 8, len(parse.tokens)
    hw = side * side

    # perfect alignment: each pair-token attention column equals the
    # normalized mask indicator; mask covers 25% of the image
    mask = np.zeros((32, 32), dtype=bool)
    mask[:16, :16] = True
    a = np.full((hw, n_tok), 1.0 / hw, dtype=DTYPE)
    # "perfect alignment" = the token's attention column is the mask
    # indicator: every unit of mass inside, none outside
    col = mask[::4, ::4].reshape(-1).astype(DTYPE)
    pair = parse.pairs[0]
    a[:, pair.attr_index] = col
    a[:, pair.obj_index] = col
    loss = localization_loss([Tensor(a)], parse, mask[None])
    assert float(loss.data) == pytest.approx(-0.5, abs=1e-7)

    # uniform attention, half-image mask -> exactly zero
    half = np.zeros((32, 32), dtype=bool)
    half[:16, :] = True
    uni = np.full((hw, n_tok), 1.0 / hw, dtype=np.float64)
    loss0 = localization_loss([Tensor(uni)], parse, half[None])
    assert float(loss0.data) == 0.0


def test_02_loss_matches_loop_oracle():
    rng = np.random.default_rng(0)
    parse = parse_prompt("a red car and a blue disc", VOCAB)
    n_tok = len(parse.tokens)
    for side in (8, 16):
        hw = side * side
        logits = rng.normal(size=(hw, n_tok))
        a = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        masks = rng.random((2, 32, 32)) > 0.6
        got = float(localization_loss([Tensor(a)], parse, masks).data)

        # independent elementwise re-derivation
        from protofuse.fusion import downsample_mask

        want = 0.0
        for j, pair in enumerate(parse.pairs):
            m = downsample_mask(masks[j], side, side).reshape(-1)
            for tok in (pair.attr_index, pair.obj_index):
                inside = outside = 0.0
                for px in range(hw):
                    if m[px]:
                        inside += a[px, tok]
                    else:
                        outside += a[px, tok]
                want += outside / hw - inside / hw
        want /= len(parse.pairs)
        assert got == pytest.approx(want, abs=1e-6)


# -- 3: attention normalization ---------------------------------------------


def test_03_attention_rows_sum_to_one():
    model = make_model(len(VOCAB), d=16, d_attn=16, channels=(8, 16), T=20, seed=5)
    rng = np.random.default_rng(5)
    n_passes = 0
    with ad.no_grad():
        while n_passes < 1000:
            b = 50
            z = rng.standard_normal((b, 3, 32, 32)).astype(DTYPE)
            t = rng.integers(1, 21, size=b)
            tokens = [VOCAB.id(w) for w in "a red car".split()]
            c = model.text.encode_batch([tokens] * b)
            _, attn = model.denoiser.predict(z, t, c)
            for a in attn:
                sums = a.data.sum(axis=-1)
                assert np.allclose(sums, 1.0, atol=1e-6)
            n_passes += b


# -- 4: gradient correctness of the full objective --------------------------


def test_04_full_objective_grad_check():
    bundle = make_model(len(VOCAB), d=16, d_attn=16, channels=(8, 16), T=20, seed=6)
    for t in bundle.named_params().values():
        t.data = t.data.astype(np.float64)
        t.requires_grad = False

    vsc = VSCModel.create(d=16, D=32, lam=0.1, seed=6)
    for t in vsc.named_params().values():
        t.data = t.data.astype(np.float64)
    # break the exact identity init so gradients are not trivially zero
    rng = np.random.default_rng(6)
    for t in vsc.mlp.named_params().values():
        t.data = t.data + 0.05 * rng.normal(size=t.data.shape)

    prompts = make_prompt_set(2, 1, ATTR_CATEGORIES, VOCAB, seed=6)
    [ex] = synthesize_dataset(
        SynthesisConfig(prompts=prompts, k_gen=1, k_keep=1, seed=6), VOCAB
    )
    pairs = sorted({(p.attr_token, p.obj_token) for p in ex.parse.pairs})
    refs = ReferenceSet(
        images={p: rng.normal(size=(2, 3, 32, 32)) for p in pairs},
        seeds={p: [0, 1] for p in pairs},
        prompts={p: "" for p in pairs},
    )
    t_step = 10
    eps = rng.normal(size=(1, 3, 32, 32))
    # keep float64 end to end: predict() would cast a raw ndarray to float32
    z_t = Tensor(
        forward_diffuse(ex.image.astype(np.float64)[None], t_step, eps, bundle.sched)
    )

    mlp_names = sorted(vsc.mlp.named_params())
    tail_names = list(vsc.phi.TAIL)
    params = [vsc.mlp.named_params()[n] for n in mlp_names] + [
        vsc.phi.named_params()[n] for n in tail_names
    ]

    def loss_fn(p64):
        store = dict(zip(mlp_names + tail_names, p64))
        for name in mlp_names:
            vsc.mlp._params[name] = store[name]
        for name in tail_names:
            vsc.phi._params[name] = store[name]
        m = vsc.mlp
        m.gate, m.g, m.b = store["mlp.gate"], store["mlp.norm_g"], store["mlp.norm_b"]
        m.w1, m.b1 = store["mlp.w1"], store["mlp.b1"]
        m.w2, m.b2 = store["mlp.w2"], store["mlp.b2"]
        ph = vsc.phi
        ph.fc1_w, ph.fc1_b = store["phi.fc1_w"], store["phi.fc1_b"]
        ph.fc2_w, ph.fc2_b = store["phi.fc2_w"], store["phi.fc2_b"]

        protos = vsc.prototypes_for(pairs, refs)
        pair_proto = {
            j: protos[pairs.index((p.attr_token, p.obj_token))]
            for j, p in enumerate(ex.parse.pairs)
        }
        c = bundle.text.encode(ex.tokens)
        c_prime = fuse_embeddings(c, ex.parse, pair_proto, vsc.mlp, vsc.projection)
        n, d = c_prime.data.shape
        eps_hat, attn = bundle.denoiser.predict(
            z_t, t_step, ad.reshape(c_prime, (1, n, d))
        )
        l_noise = noise_loss(eps, eps_hat)
        l_loc = localization_loss(attn, ex.parse, ex.masks)
        return total_loss(l_noise, l_loc, vsc.lam)

    report = grad_check(loss_fn, params, tolerance=1e-4, n_samples=200, h=1e-4, seed=6)
    assert report["worst"]["rel_err"] < 1e-4


# -- 5: fusion identity ------------------------------------------------------


def test_05_fusion_identity_and_untouched_rows():
    parse = parse_prompt("a red car and a blue disc", VOCAB)
    rng = np.random.default_rng(7)
    c = Tensor(rng.normal(size=(len(parse.tokens), 16)).astype(DTYPE))
    protos = {j: Tensor(rng.normal(size=32).astype(DTYPE)) for j in range(2)}
    from protofuse.fusion import orthogonal_projection

    proj = orthogonal_projection(32, 16)

    # identity-initialized MLP: c' == c everywhere
    mlp = FusionMLP(d=16, seed=0)
    out = fuse_embeddings(c, parse, protos, mlp, proj)
    assert np.array_equal(out.data, c.data)

    # perturbed MLP: rows outside the pair-token set stay bit-identical
    for t in mlp.named_params().values():
        t.data = t.data + 0.3
    out2 = fuse_embeddings(c, parse, protos, mlp, proj)
    fused_idx = {i for p in parse.pairs for i in (p.attr_index, p.obj_index)}
    for i in range(len(parse.tokens)):
        same = np.array_equal(out2.data[i], c.data[i])
        assert same == (i not in fused_idx)


# -- 6: frozen contract ------------------------------------------------------


def test_06_frozen_base_through_vsc_training():
    bundle = make_model(len(VOCAB), d=16, d_attn=16, channels=(8, 16), T=20, seed=8)
    prompts = make_prompt_set(2, 3, ATTR_CATEGORIES, VOCAB, seed=8)
    examples = synthesize_dataset(
        SynthesisConfig(prompts=prompts, k_gen=2, k_keep=1, seed=8), VOCAB
    )
    pairs = sorted(
        {(p.attr_token, p.obj_token) for ex in examples for p in ex.parse.pairs}
    )
    rng = np.random.default_rng(8)
    refs = ReferenceSet(
        images={p: rng.normal(size=(2, 3, 32, 32)).astype(DTYPE) for p in pairs},
        seeds={p: [0, 1] for p in pairs},
        prompts={p: "" for p in pairs},
    )
    before = {k: v.data.copy() for k, v in bundle.named_params().items()}
    hash_before = bundle.content_hash()
    vsc = VSCModel.create(d=16, D=128, lam=0.1, seed=8)
    train_vsc(vsc, bundle, examples, refs, VOCAB, steps=5, batch_size=2, seed=8)
    assert bundle.content_hash() == hash_before
    for k, v in bundle.named_params().items():
        assert np.array_equal(v.data, before[k]), k


# -- 7: single-binding competence -------------------------------------------


def test_07_single_pair_binding(pipe):
    doc = pipe.report_single_binding()
    assert doc["n_seeds"] >= 100
    assert doc["mean"] >= 0.90


# -- 8: core claim on held-out 2-pair prompts -------------------------------


def test_08_vsc_beats_base_heldout(pipe):
    doc = pipe.report_heldout_two()
    assert doc["n_samples"] >= 200
    assert doc["vsc"]["mean"] - doc["base"]["mean"] >= 0.10
    st = doc["sign_test"]
    assert st["significant"] and st["p_value"] < 0.01


# -- 9: pair-scaling trend ---------------------------------------------------


def test_09_scaling_trend(pipe):
    doc = pipe.report_scaling()
    by_model = {}
    for r in doc["rows"]:
        by_model.setdefault(r["model"], {})[r["n_pairs"]] = r["mean_score"]
    degradation = {}
    for model, scores in by_model.items():
        seq = [scores[n] for n in (2, 3, 4, 5)]
        assert all(a >= b - 1e-9 for a, b in zip(seq, seq[1:])), (model, seq)
        degradation[model] = seq[0] - seq[-1]
    assert degradation["vsc"] < degradation["base"]


# -- 10: localization ablation ----------------------------------------------


def test_10_localization_ablation(pipe):
    doc = pipe.report_localization_ablation()
    assert doc["final_l_loc_trainable"] < doc["final_l_loc_frozen"]
    assert doc["final_l_loc_trainable"] < 0
    # frozen run: flat (no decrease beyond noise) after the first third
    drop = (
        doc["frozen_after_third_mean_first_half"]
        - doc["frozen_after_third_mean_second_half"]
    )
    assert drop < 0.01


# -- 11: attention precision under inversion --------------------------------


def test_11_attention_iou(pipe):
    doc = pipe.report_attention_iou()
    assert doc["n_scenes"] == 50
    assert doc["vsc_mean"] > doc["base_mean"]


# -- 12: category transfer ---------------------------------------------------


def test_12_color_only_transfer(pipe):
    doc = pipe.report_transfer()
    for cat in ("texture", "shape"):
        assert doc[cat]["vsc_color"] - doc[cat]["base"] >= 0.03, cat


# -- 13: benchmark instrumentation ------------------------------------------


def test_13_benchmark_batched_references(pipe):
    doc = pipe.report_benchmark()
    assert (ARTIFACTS / "reports" / "benchmark.csv").exists()
    n_refs = pipe.cfg.vsc["n_refs"]
    vsc_rows = [r for r in doc["rows"] if r["model"].startswith("vsc")]
    assert vsc_rows
    for r in vsc_rows:
        # cold cache: exactly one batched reference run covering every
        # (pair, replica), then the final sampling run
        assert r["sampler_runs_cold"] == 2
        assert r["run_batches"][0] == n_refs * r["n_pairs"]
        # warm cache: references are reused, only the final run remains
        assert r["sampler_runs_warm"] == 1
        assert r["median_time"] > 0


# -- 14: infrastructure ------------------------------------------------------


def test_14_checkpoint_round_trip(tmp_path):
    model = make_model(len(VOCAB), d=16, d_attn=16, channels=(8, 16), T=20, seed=9)
    path = tmp_path / "m.vsck"
    save_bundle(model, path)
    loaded = load_bundle(path)
    for k, v in model.named_params().items():
        assert loaded.named_params()[k].data.tobytes() == v.data.tobytes()
    assert np.array_equal(loaded.sched.betas, model.sched.betas)


def test_14_container_round_trip_exact(tmp_path):
    rng = np.random.default_rng(10)
    tensors = {
        "a": rng.normal(size=(7, 3)).astype(np.float32),
        "b": rng.normal(size=(2, 2, 2)).astype(np.float32),
        "s": np.float32(1.25),
    }
    path = tmp_path / "t.vsck"
    save_tensors(tensors, path, meta={"k": 1})
    out, meta = load_tensors(path)
    assert meta == {"k": 1}
    for k in tensors:
        assert np.asarray(out[k]).tobytes() == np.asarray(tensors[k]).tobytes()


def test_14_manifest_reproducibility(pipe, tmp_path):
    # the committed artifact must match its manifest hash, and rebuilding
    # from the same config in a clean directory must reproduce it bit-exactly
    pipe.dataset()
    manifest = json.loads((ARTIFACTS / "dataset.manifest.json").read_text())
    from protofuse.persistence import file_hash

    assert file_hash(ARTIFACTS / "dataset.bin") == manifest["outputs"]["dataset.bin"]
    clean = Pipeline(pipe.cfg, tmp_path)
    clean.dataset()
    assert file_hash(tmp_path / "dataset.bin") == manifest["outputs"]["dataset.bin"]
