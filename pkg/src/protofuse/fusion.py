"""Prototype-embedding fusion: image encoder, fusion MLP, and the
attention-localization objective.

Reference images of a single attribute-object pair are embedded with a
small conv encoder and averaged into a per-pair prototype; prompt tokens
belonging to the pair are replaced by an MLP fusion of their text
embedding with the (projected) prototype.  The localization loss pushes
those tokens' cross-attention mass inside the pair's segmentation mask.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grammar import PromptParse
from .nn import DTYPE, ParamStore, conv_init, linear_init


class EmptySet(ValueError):
    pass


class MissingPrototype(KeyError):
    pass


class MaskCountMismatch(ValueError):
    pass


class ImageEncoder(ParamStore):
    """Conv encoder phi: (3, 32, 32) -> R^D.  The trainable tail is the
    final two linear layers (with the nonlinearity between them)."""

    TAIL = ("phi.fc1_w", "phi.fc1_b", "phi.fc2_w", "phi.fc2_b")

    def __init__(self, out_dim: int = 128, seed: int = 0):
        super().__init__()
        self.out_dim = out_dim
        rng = np.random.default_rng(seed)
        p, ci, li = self.param, conv_init, linear_init
        self.c1_w = p("phi.c1_w", ci(rng, 16, 3, 3))
        self.c1_b = p("phi.c1_b", np.zeros(16))
        self.c2_w = p("phi.c2_w", ci(rng, 32, 16, 3))
        self.c2_b = p("phi.c2_b", np.zeros(32))
        self.c3_w = p("phi.c3_w", ci(rng, 64, 32, 3))
        self.c3_b = p("phi.c3_b", np.zeros(64))
        self.fc1_w = p("phi.fc1_w", li(rng, 64 * 4 * 4, out_dim))
        self.fc1_b = p("phi.fc1_b", np.zeros(out_dim))
        self.fc2_w = p("phi.fc2_w", li(rng, out_dim, out_dim))
        self.fc2_b = p("phi.fc2_b", np.zeros(out_dim))

    def encode(self, images: np.ndarray | Tensor) -> Tensor:
        """Embed a batch (N, 3, 32, 32) -> (N, D)."""
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=DTYPE))
        if images.data.ndim == 3:
            images = Tensor(images.data[None])
        h = ad.silu(ad.conv2d(images, self.c1_w, self.c1_b, stride=2))  # 16
        h = ad.silu(ad.conv2d(h, self.c2_w, self.c2_b, stride=2))  # 8
        h = ad.silu(ad.conv2d(h, self.c3_w, self.c3_b, stride=2))  # 4
        n = h.data.shape[0]
        h = ad.reshape(h, (n, 64 * 4 * 4))
        h = ad.silu(ad.add(ad.matmul(h, self.fc1_w), self.fc1_b))
        return ad.add(ad.matmul(h, self.fc2_w), self.fc2_b)

    def freeze_except_tail(self, tail_trainable: bool = True) -> None:
        for name, t in self.named_params().items():
            t.requires_grad = tail_trainable and name in self.TAIL


def pretrain_image_encoder(
    encoder: ImageEncoder,
    vocab,
    steps: int = 1500,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    noise_sigma: float = 0.05,
    log=None,
) -> list[dict]:
    """Train phi as an attribute+object classifier on single-pair renders.

    The classification heads are discarded; only the embedding trunk is
    kept for prototype extraction.
    """
    from .nn import Adam, linear_init
    from .render import SceneSpec, render_scene
    from .vocab import Category

    rng = np.random.default_rng(seed)
    attrs = vocab.attr_ids()
    objs = vocab.ids_in(Category.OBJECT)
    attr_pos = {a: i for i, a in enumerate(attrs)}
    obj_pos = {o: i for i, o in enumerate(objs)}
    head_a = Tensor(
        linear_init(rng, encoder.out_dim, len(attrs)).astype(DTYPE), requires_grad=True
    )
    head_o = Tensor(
        linear_init(rng, encoder.out_dim, len(objs)).astype(DTYPE), requires_grad=True
    )
    params = {**encoder.trainable_params(), "head_a": head_a, "head_o": head_o}
    opt = Adam(params, lr=lr)
    cells = [(r, c) for r in range(2) for c in range(3)]
    history = []
    for step in range(steps):
        imgs, ya, yo = [], [], []
        for _ in range(batch_size):
            a = attrs[rng.integers(len(attrs))]
            o = objs[rng.integers(len(objs))]
            cell = cells[rng.integers(len(cells))]
            img, _ = render_scene(SceneSpec(pairs=((a, o),), placements=(cell,)), vocab)
            img = img + rng.normal(0, noise_sigma, img.shape).astype(DTYPE)
            imgs.append(img.astype(DTYPE))
            ya.append(attr_pos[a])
            yo.append(obj_pos[o])
        emb = encoder.encode(np.stack(imgs))
        loss = ad.add(
            _cross_entropy(ad.matmul(emb, head_a), ya),
            _cross_entropy(ad.matmul(emb, head_o), yo),
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 200 == 0 or step == steps - 1:
            history.append({"step": step, "loss": float(loss.data)})
            if log:
                log(f"phi pretrain step {step}: loss {float(loss.data):.4f}")
    return history


def _cross_entropy(logits: Tensor, labels) -> Tensor:
    probs = ad.softmax(logits, axis=-1)
    n = logits.data.shape[0]
    onehot = np.zeros(logits.data.shape, dtype=logits.data.dtype)
    onehot[np.arange(n), np.asarray(labels)] = 1.0
    picked = ad.sum_(ad.mul(probs, Tensor(onehot)), axis=-1)
    return ad.mul(ad.sum_(ad.log(ad.add(picked, 1e-12))), -1.0 / n)


def prototype(vs) -> Tensor:
    """Coordinate-wise arithmetic mean of embedding vectors."""
    if isinstance(vs, Tensor):
        if vs.data.shape[0] == 0:
            raise EmptySet("no embeddings to average")
        return ad.mean(vs, axis=0)
    vs = list(vs)
    if not vs:
        raise EmptySet("no embeddings to average")
    stacked = ad.concat([ad.reshape(v, (1, v.data.shape[-1])) for v in vs], axis=0)
    return ad.mean(stacked, axis=0)


def orthogonal_projection(d_in: int, d_out: int, seed: int = 1234) -> np.ndarray:
    """Fixed projection with orthonormal rows, frozen for the whole model."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(d_in, d_in))
    q, _ = np.linalg.qr(a)
    return q[:, :d_out].T.astype(DTYPE)  # (d_out, d_in)


class FusionMLP(ParamStore):
    """Two affine layers with a gated feature normalization on the input.

    Initialized to the identity on the text half: the normalization gate
    starts at 0 and the final affine selects the text block, so fused
    rows equal their inputs at step 0.
    """

    def __init__(self, d: int = 64, seed: int = 0):
        super().__init__()
        self.d = d
        two_d = 2 * d
        self.gate = self.param("mlp.gate", np.zeros(()))
        self.g = self.param("mlp.norm_g", np.ones(two_d))
        self.b = self.param("mlp.norm_b", np.zeros(two_d))
        self.w1 = self.param("mlp.w1", np.eye(two_d))
        self.b1 = self.param("mlp.b1", np.zeros(two_d))
        w2 = np.zeros((two_d, d))
        w2[:d, :] = np.eye(d)  # select the text block
        self.w2 = self.param("mlp.w2", w2)
        self.b2 = self.param("mlp.b2", np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        """x: (m, 2d) concatenated [text_row, projected_prototype]."""
        normed = ad.layer_norm(x, self.g, self.b)
        # gated blend keeps the init exact: gate starts at 0 so mix == x
        mix = ad.add(x, ad.mul(ad.add(normed, ad.mul(x, -1.0)), self.gate))
        h = ad.add(ad.matmul(mix, self.w1), self.b1)
        return ad.add(ad.matmul(h, self.w2), self.b2)


def fuse_embeddings(
    c: Tensor,
    parse: PromptParse,
    prototypes: dict[int, Tensor],
    mlp: FusionMLP,
    projection: np.ndarray,
) -> Tensor:
    """Replace pair-token rows of c with MLP([c_i, proj(e_j)]).

    Rows outside the pair index set are bit-identical to the input.
    Both tokens of a pair share the pair's prototype.
    """
    if not parse.pairs:
        return c
    idx: list[int] = []
    protos: list[Tensor] = []
    for pair in parse.pairs:
        if pair.pair_id not in prototypes:
            raise MissingPrototype(pair.pair_id)
        e = prototypes[pair.pair_id]
        for i in (pair.attr_index, pair.obj_index):
            idx.append(i)
            protos.append(e)
    rows = ad.gather_rows(c, idx)  # (2p, d)
    proj_t = Tensor(projection.astype(c.data.dtype))
    pmat = ad.concat(
        [ad.reshape(ad.matmul(ad.reshape(e, (1, -1)), ad.transpose(proj_t, (1, 0))), (1, -1)) for e in protos],
        axis=0,
    )  # (2p, d)
    fused = mlp.forward(ad.concat([rows, pmat], axis=1))
    return ad.set_rows(c, idx, fused)


def downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-average then re-binarize at 0.5."""
    H, W = mask.shape
    fy, fx = H // h, W // w
    avg = mask.astype(np.float64).reshape(h, fy, w, fx).mean(axis=(1, 3))
    return avg >= 0.5


def localization_loss(attn: list[Tensor], parse: PromptParse, masks: np.ndarray) -> Tensor:
    """Balanced L1 attention-localization objective, averaged over layers.

    attn: per-layer (N=1, h*w, n_tok) or (h*w, n_tok) row-stochastic maps.
    masks: (n_pairs, H, W) binary, index-aligned with parse.pairs.
    """
    if masks.shape[0] != len(parse.pairs):
        raise MaskCountMismatch(f"{masks.shape[0]} masks vs {len(parse.pairs)} pairs")
    n_pairs = len(parse.pairs)
    per_layer = []
    for a in attn:
        if a.data.ndim == 3:
            a = ad.reshape(a, a.data.shape[1:])
        hw, _ = a.data.shape
        side = int(round(np.sqrt(hw)))
        terms = []
        for j, pair in enumerate(parse.pairs):
            m = downsample_mask(masks[j], side, side).reshape(-1).astype(a.data.dtype)
            m_t = Tensor(m)
            mbar_t = Tensor(1.0 - m)
            for tok_idx in (pair.attr_index, pair.obj_index):
                col = ad.gather_rows(ad.transpose(a, (1, 0)), [tok_idx])  # (1, hw)
                inside = ad.mean(ad.mul(col, m_t))
                outside = ad.mean(ad.mul(col, mbar_t))
                terms.append(ad.add(outside, ad.mul(inside, -1.0)))
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        per_layer.append(ad.mul(total, 1.0 / n_pairs))
    stacked = per_layer[0]
    for t in per_layer[1:]:
        stacked = ad.add(stacked, t)
    return ad.mul(stacked, 1.0 / len(per_layer))


def localization_loss_batched(
    attn: list[Tensor],
    pair_token_indices: list[tuple[int, int]],
    masks_batch: np.ndarray,
) -> Tensor:
    """Batched equivalent of ``localization_loss`` for same-template batches.

    attn: per-layer (B, h*w, n_tok); pair_token_indices: per-pair
    (attr_index, obj_index), shared across the batch; masks_batch:
    (B, n_pairs, H, W) aligned with the pair order.
    """
    b, n_pairs = masks_batch.shape[:2]
    per_layer = []
    for a in attn:
        hw = a.data.shape[1]
        side = int(round(np.sqrt(hw)))
        n_tok = a.data.shape[2]
        weight = np.zeros((b, hw, n_tok), dtype=a.data.dtype)
        for j, (ia, io) in enumerate(pair_token_indices):
            for bi in range(b):
                m = downsample_mask(masks_batch[bi, j], side, side).reshape(-1)
                w = (1.0 - 2.0 * m) / (hw * n_pairs)
                weight[bi, :, ia] += w
                weight[bi, :, io] += w
        per_layer.append(ad.mul(ad.sum_(ad.mul(a, Tensor(weight))), 1.0 / b))
    total = per_layer[0]
    for t in per_layer[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(per_layer))


def total_loss(l_noise: Tensor, l_loc: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return ad.add(l_noise, ad.mul(l_loc, float(lam)))
