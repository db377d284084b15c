"""Dissect the fusion path: prototypes, the identity init, and L_loc.

Run:  python3 demos/fusion_anatomy.py

No training here, just the algebra: how reference images turn into
prototypes, why the fusion MLP starts as an exact identity, and what
the localization loss sees in an attention map.
"""

import numpy as np

from protofuse import autodiff as ad
from protofuse.autodiff import Tensor
from protofuse.fusion import (
    FusionMLP,
    ImageEncoder,
    downsample_mask,
    fuse_embeddings,
    localization_loss,
    orthogonal_projection,
    prototype,
)
from protofuse.grammar import parse_prompt
from protofuse.render import render_scene, sample_scene
from protofuse.vocab import ATTR_CATEGORIES, default_vocabulary

vocab = default_vocabulary()
rng = np.random.default_rng(0)

# -- prototypes -------------------------------------------------------------
print("== prototypes ==")
phi = ImageEncoder(out_dim=128, seed=0)
refs = np.stack(
    [render_scene(sample_scene(s, 1, ATTR_CATEGORIES, vocab), vocab)[0] for s in range(3)]
)
emb = phi.encode(refs)
proto = prototype(emb)
print(f"3 reference images -> embeddings {emb.data.shape} -> prototype {proto.data.shape}")
manual = emb.data.mean(axis=0)
print("prototype == coordinate-wise mean:", np.allclose(proto.data, manual))

# the projection into text space is fixed and orthonormal
proj = orthogonal_projection(128, 64)
print("projection rows orthonormal:",
      np.allclose(proj @ proj.T, np.eye(64), atol=1e-5))

# -- identity initialization ------------------------------------------------
print()
print("== fusion identity ==")
parse = parse_prompt("a red car and a blue disc", vocab)
c = Tensor(rng.normal(size=(len(parse.tokens), 64)).astype(np.float32))
protos = {j: Tensor(rng.normal(size=128).astype(np.float32)) for j in range(2)}
mlp = FusionMLP(d=64, seed=0)
fused = fuse_embeddings(c, parse, protos, mlp, proj)
print("freshly initialized MLP leaves every row untouched:",
      np.array_equal(fused.data, c.data))

# after perturbing the MLP, only the four pair-token rows move
for t in mlp.named_params().values():
    t.data = t.data + 0.2
fused = fuse_embeddings(c, parse, protos, mlp, proj)
moved = [i for i in range(len(parse.tokens))
         if not np.array_equal(fused.data[i], c.data[i])]
pair_rows = sorted(i for p in parse.pairs for i in (p.attr_index, p.obj_index))
print(f"rows changed by a perturbed MLP: {moved} (pair tokens: {pair_rows})")

# -- localization loss ------------------------------------------------------
print()
print("== localization loss ==")
spec = sample_scene(42, 2, ATTR_CATEGORIES, vocab)
img, masks = render_scene(spec, vocab)
side, n_tok = 16, len(parse.tokens)
hw = side * side

cases = {
    "uniform attention": np.full((hw, n_tok), 1.0 / hw),
}
# oracle-aligned: each pair token's column is its own mask indicator
aligned = np.full((hw, n_tok), 1.0 / hw)
for j, pair in enumerate(parse.pairs):
    m = downsample_mask(masks[j], side, side).reshape(-1)
    aligned[:, pair.attr_index] = m
    aligned[:, pair.obj_index] = m
cases["mask-aligned attention"] = aligned
# anti-aligned: all mass outside the mask
anti = np.full((hw, n_tok), 1.0 / hw)
for j, pair in enumerate(parse.pairs):
    m = downsample_mask(masks[j], side, side).reshape(-1)
    anti[:, pair.attr_index] = 1.0 - m
    anti[:, pair.obj_index] = 1.0 - m
cases["anti-aligned attention"] = anti

for name, a in cases.items():
    loss = localization_loss([Tensor(a)], parse, masks)
    print(f"  {name:24s} L_loc = {float(loss.data):+.4f}")
print("(negative is good: more attention mass inside the pair's mask)")

# gradients flow: push uniform attention toward the masks
a = Tensor(np.full((hw, n_tok), 1.0 / hw), requires_grad=True)
loss = localization_loss([a], parse, masks)
loss.backward()
g = a.grad[:, parse.pairs[0].attr_index].reshape(side, side)
m = downsample_mask(masks[0], side, side)
print("gradient is negative exactly inside the first pair's mask:",
      bool((g[m] < 0).all() and (g[~m] > 0).all()))
