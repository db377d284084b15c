import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protofuse import autodiff as ad
from protofuse.autodiff import Tensor
from protofuse.fusion import (
    EmptySet,
    FusionMLP,
    ImageEncoder,
    MaskCountMismatch,
    MissingPrototype,
    downsample_mask,
    fuse_embeddings,
    localization_loss,
    localization_loss_batched,
    orthogonal_projection,
    prototype,
    total_loss,
)
from protofuse.grammar import parse_prompt
from protofuse.vocab import default_vocabulary

VOCAB = default_vocabulary()


def test_prototype_is_mean():
    vs = Tensor(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
    assert np.allclose(prototype(vs).data, [3.0, 4.0])


def test_prototype_empty():
    with pytest.raises(EmptySet):
        prototype(Tensor(np.zeros((0, 4))))
    with pytest.raises(EmptySet):
        prototype([])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_prototype_permutation_invariant(m, seed):
    rng = np.random.default_rng(seed)
    vs = rng.standard_normal((m, 8))
    perm = rng.permutation(m)
    a = prototype(Tensor(vs)).data
    b = prototype(Tensor(vs[perm])).data
    assert np.allclose(a, b, atol=1e-12)


def test_orthogonal_projection_rows_orthonormal():
    p = orthogonal_projection(128, 64)
    assert p.shape == (64, 128)
    assert np.allclose(p @ p.T, np.eye(64), atol=1e-5)


def test_fusion_mlp_identity_at_init():
    mlp = FusionMLP(d=8)
    rng = np.random.default_rng(0)
    text = rng.standard_normal((5, 8)).astype(np.float32)
    proto = rng.standard_normal((5, 8)).astype(np.float32)
    out = mlp.forward(Tensor(np.concatenate([text, proto], axis=1)))
    assert np.array_equal(out.data, text)


def test_fuse_embeddings_identity_init_full_prompt():
    parse = parse_prompt("a red car and a blue disc", VOCAB)
    rng = np.random.default_rng(1)
    c = Tensor(rng.standard_normal((len(parse.tokens), 16)).astype(np.float32))
    mlp = FusionMLP(d=16)
    proj = orthogonal_projection(32, 16)
    protos = {p.pair_id: Tensor(rng.standard_normal(32).astype(np.float32)) for p in parse.pairs}
    out = fuse_embeddings(c, parse, protos, mlp, proj)
    assert out.data.tobytes() == c.data.tobytes()  # identity init: c' == c


def test_fuse_embeddings_rows_outside_index_set_untouched():
    parse = parse_prompt("a red car and a blue disc", VOCAB)
    rng = np.random.default_rng(2)
    c = Tensor(rng.standard_normal((len(parse.tokens), 16)).astype(np.float32))
    mlp = FusionMLP(d=16)
    mlp.gate.data += 0.7  # leave the identity regime
    mlp.w2.data += rng.standard_normal(mlp.w2.data.shape).astype(np.float32) * 0.1
    proj = orthogonal_projection(32, 16)
    protos = {p.pair_id: Tensor(rng.standard_normal(32).astype(np.float32)) for p in parse.pairs}
    out = fuse_embeddings(c, parse, protos, mlp, proj)
    outside = [i for i in range(len(parse.tokens)) if i not in parse.index_set]
    assert out.data[outside].tobytes() == c.data[outside].tobytes()
    assert not np.array_equal(out.data[list(parse.index_set)], c.data[list(parse.index_set)])


def test_fuse_embeddings_missing_prototype():
    parse = parse_prompt("a red car", VOCAB)
    c = Tensor(np.zeros((3, 16), dtype=np.float32))
    with pytest.raises(MissingPrototype):
        fuse_embeddings(c, parse, {}, FusionMLP(d=16), orthogonal_projection(32, 16))


def test_downsample_mask():
    m = np.zeros((32, 32), dtype=bool)
    m[:16, :16] = True
    d = downsample_mask(m, 16, 16)
    assert d[:8, :8].all() and not d[8:, :].any() and not d[:, 8:].any()
    # half coverage within a block binarizes to True at exactly 0.5
    m2 = np.zeros((4, 4), dtype=bool)
    m2[0, :2] = True  # one 2x2 block half-covered
    assert downsample_mask(m2, 2, 2)[0, 0]


def _uniform_attn(hw, n_tok, batch=False):
    a = np.full((hw, n_tok), 1.0 / n_tok, dtype=np.float64)
    return Tensor(a[None] if batch else a)


def test_localization_loss_perfect_alignment():
    """All attention inside a quarter-area mask gives exactly -0.5."""
    parse = parse_prompt("a red car", VOCAB)
    mask = np.zeros((32, 32), dtype=bool)
    mask[:16, :16] = True  # 25% coverage
    hw = 16 * 16
    m = downsample_mask(mask, 16, 16).reshape(-1)
    a = np.zeros((hw, 3))
    for tok in (parse.pairs[0].attr_index, parse.pairs[0].obj_index):
        a[m, tok] = 1.0  # each pair token attends exactly on the mask
    loss = localization_loss([Tensor(a)], parse, mask[None])
    # per token: mean(A*Mbar) - mean(A*M) = 0 - 0.25; two tokens -> -0.5
    assert loss.data == pytest.approx(-0.5, abs=1e-12)


def test_localization_loss_uniform_half_mask_zero():
    parse = parse_prompt("a red car", VOCAB)
    mask = np.zeros((32, 32), dtype=bool)
    mask[:16, :] = True  # half coverage
    loss = localization_loss([_uniform_attn(256, 3)], parse, mask[None])
    assert loss.data == pytest.approx(0.0, abs=1e-12)


def test_localization_loss_mask_count_mismatch():
    parse = parse_prompt("a red car", VOCAB)
    with pytest.raises(MaskCountMismatch):
        localization_loss([_uniform_attn(256, 3)], parse, np.zeros((2, 32, 32), dtype=bool))


def _loop_oracle(attn_layers, parse, masks):
    """Element-loop reference implementation of the localization loss."""
    total = 0.0
    for a in attn_layers:
        data = a.data if a.data.ndim == 2 else a.data[0]
        hw = data.shape[0]
        side = int(round(np.sqrt(hw)))
        layer = 0.0
        for j, pair in enumerate(parse.pairs):
            m = downsample_mask(masks[j], side, side).reshape(-1)
            for tok in (pair.attr_index, pair.obj_index):
                inside = outside = 0.0
                for i in range(hw):
                    v = data[i, tok]
                    if m[i]:
                        inside += v
                    else:
                        outside += v
                layer += outside / hw - inside / hw
        total += layer / len(parse.pairs)
    return total / len(attn_layers)


def test_localization_loss_matches_loop_oracle():
    rng = np.random.default_rng(3)
    parse = parse_prompt("a red car and a blue disc", VOCAB)
    masks = np.zeros((2, 32, 32), dtype=bool)
    masks[0, 2:12, 2:12] = True
    masks[1, 18:30, 20:30] = True
    for trial in range(5):
        attn = []
        for hw in (256, 64):
            logits = rng.standard_normal((hw, len(parse.tokens)))
            a = np.exp(logits)
            a /= a.sum(axis=1, keepdims=True)
            attn.append(Tensor(a))
        got = localization_loss(attn, parse, masks).data
        want = _loop_oracle(attn, parse, masks)
        assert got == pytest.approx(want, abs=1e-6)


def test_batched_localization_matches_per_example():
    rng = np.random.default_rng(4)
    parse = parse_prompt("a red car and a blue disc", VOCAB)
    masks = np.zeros((3, 2, 32, 32), dtype=bool)
    for b in range(3):
        masks[b, 0, 2 + b : 12, 2:12] = True
        masks[b, 1, 18:30, 20 : 30 - b] = True
    attn_b = []
    for hw in (256, 64):
        logits = rng.standard_normal((3, hw, len(parse.tokens)))
        a = np.exp(logits)
        a /= a.sum(axis=2, keepdims=True)
        attn_b.append(Tensor(a))
    pair_pos = [(p.attr_index, p.obj_index) for p in parse.pairs]
    got = localization_loss_batched(attn_b, pair_pos, masks).data
    per = [
        localization_loss([Tensor(a.data[b]) for a in attn_b], parse, masks[b]).data
        for b in range(3)
    ]
    assert got == pytest.approx(np.mean(per), abs=1e-6)


def test_total_loss_lambda_validation():
    l = Tensor(np.array(1.0))
    assert total_loss(l, l, 0.5).data == pytest.approx(1.5)
    with pytest.raises(ValueError):
        total_loss(l, l, -0.1)


def test_image_encoder_shapes_and_tail_freeze():
    enc = ImageEncoder(out_dim=32, seed=0)
    out = enc.encode(np.zeros((4, 3, 32, 32), dtype=np.float32))
    assert out.data.shape == (4, 32)
    enc.freeze_except_tail(tail_trainable=True)
    trainable = set(enc.trainable_params())
    assert trainable == set(ImageEncoder.TAIL)
    enc.freeze_except_tail(tail_trainable=False)
    assert not enc.trainable_params()
