"""Pixel-space text-conditioned UNet denoiser.

Resolutions 32/16/8 with cross-attention at 16 and 8.  The forward pass
returns the noise estimate together with the per-layer attention maps
(row-stochastic over tokens) so losses can supervise attention directly.

Each resolution uses a residual block with single-group normalization
and scale/shift timestep conditioning; the final conv is zero-initialized
so a fresh network is the identity on its analytic baseline.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import DTYPE, ParamStore, conv_init, linear_init, timestep_embedding
from .schedule import ShapeMismatch


class Denoiser(ParamStore):
    def __init__(
        self,
        d: int = 64,
        d_attn: int = 64,
        channels: tuple[int, int] = (32, 64),
        t_dim: int = 64,
        seed: int = 0,
    ):
        super().__init__()
        c1, c2 = channels
        self.d = d
        self.d_attn = d_attn
        self.channels = channels
        self.t_dim = t_dim
        rng = np.random.default_rng(seed)

        p, ci, li = self.param, conv_init, linear_init
        self.t_w1 = p("den.t_w1", li(rng, t_dim, t_dim))
        self.t_b1 = p("den.t_b1", np.zeros(t_dim))
        self.t_w2 = p("den.t_w2", li(rng, t_dim, t_dim))
        self.t_b2 = p("den.t_b2", np.zeros(t_dim))

        # pooled-prompt pathway: the token mean feeds the same scale/shift
        # conditioning as the timestep, giving scene content a global route
        # into every residual block; cross-attention alone is too weak a
        # signal for a model this small to follow the prompt
        self.c_w1 = p("den.c_w1", li(rng, d, t_dim))
        self.c_b1 = p("den.c_b1", np.zeros(t_dim))
        self.c_w2 = p("den.c_w2", li(rng, t_dim, t_dim))
        self.c_b2 = p("den.c_b2", np.zeros(t_dim))

        self.enc0_w = p("den.enc0_w", ci(rng, c1, 3, 3))
        self.enc0_b = p("den.enc0_b", np.zeros(c1))

        # learned positional maps: convs alone are translation-equivariant
        # and could never represent the scene grid
        self.pos0 = p("den.pos0", rng.normal(0, 0.02, size=(1, c1, 32, 32)))
        self.pos1 = p("den.pos1", rng.normal(0, 0.02, size=(1, c2, 16, 16)))

        def resblock(name: str, c: int) -> dict:
            return {
                "n1_g": p(f"den.{name}_n1g", np.ones((1, c, 1, 1))),
                "n1_b": p(f"den.{name}_n1b", np.zeros((1, c, 1, 1))),
                "c1_w": p(f"den.{name}_c1w", ci(rng, c, c, 3)),
                "c1_b": p(f"den.{name}_c1b", np.zeros(c)),
                "ts_w": p(f"den.{name}_tsw", li(rng, t_dim, c)),
                "tb_w": p(f"den.{name}_tbw", li(rng, t_dim, c)),
                "n2_g": p(f"den.{name}_n2g", np.ones((1, c, 1, 1))),
                "n2_b": p(f"den.{name}_n2b", np.zeros((1, c, 1, 1))),
                "c2_w": p(f"den.{name}_c2w", np.zeros((c, c, 3, 3))),
                "c2_b": p(f"den.{name}_c2b", np.zeros(c)),
            }

        self.res0 = resblock("res0", c1)  # 32x32
        self.down1_w = p("den.down1_w", ci(rng, c2, c1, 3))
        self.down1_b = p("den.down1_b", np.zeros(c2))
        self.res1 = resblock("res1", c2)  # 16x16
        self.down2_w = p("den.down2_w", ci(rng, c2, c2, 3))
        self.down2_b = p("den.down2_b", np.zeros(c2))
        self.res2 = resblock("res2", c2)  # 8x8
        self.mid = resblock("mid", c2)  # 8x8

        # cross-attention projections at 16 (layer 0) and 8 (layer 1)
        self.attn = []
        for layer, f in ((0, c2), (1, c2)):
            blk = {
                "wq": p(f"den.attn{layer}_wq", li(rng, f, d_attn)),
                "wk": p(f"den.attn{layer}_wk", li(rng, d, d_attn)),
                "wv": p(f"den.attn{layer}_wv", li(rng, d, d_attn)),
                "wo": p(f"den.attn{layer}_wo", li(rng, d_attn, f)),
            }
            self.attn.append(blk)

        self.up1_w = p("den.up1_w", ci(rng, c2, c2, 3))
        self.up1_b = p("den.up1_b", np.zeros(c2))
        self.res3 = resblock("res3", c2)  # 16x16, after skip merge

        self.up2_w = p("den.up2_w", ci(rng, c1, c2, 3))
        self.up2_b = p("den.up2_b", np.zeros(c1))
        self.res4 = resblock("res4", c1)  # 32x32, after skip merge

        self.out_ng = p("den.out_ng", np.ones((1, c1, 1, 1)))
        self.out_nb = p("den.out_nb", np.zeros((1, c1, 1, 1)))
        self.out_w = p("den.out_w", np.zeros((3, c1, 3, 3)))
        self.out_b = p("den.out_b", np.zeros(3))

        # when a schedule is attached the net predicts a residual around
        # sqrt(1 - alpha_bar_t) * z_t, the optimal estimate for a
        # zero-signal prior; this keeps the high-noise regime stable
        # instead of asking the conv stack to learn an identity map
        self.sched = None

    # attention resolutions as (h, w) per captured layer, outermost first
    @property
    def attn_shapes(self) -> list[tuple[int, int]]:
        return [(16, 16), (8, 8)]

    def _tproj(self, temb: Tensor, w: Tensor, n: int, c: int) -> Tensor:
        return ad.reshape(ad.matmul(temb, w), (n, c, 1, 1))

    def _resblock(self, x: Tensor, blk: dict, temb: Tensor) -> Tensor:
        n, c = x.data.shape[:2]
        h = ad.silu(ad.channel_norm(x, blk["n1_g"], blk["n1_b"]))
        h = ad.conv2d(h, blk["c1_w"], blk["c1_b"])
        scale = self._tproj(temb, blk["ts_w"], n, c)
        shift = self._tproj(temb, blk["tb_w"], n, c)
        h = ad.channel_norm(h, blk["n2_g"], blk["n2_b"])
        h = ad.add(ad.add(h, ad.mul(h, scale)), shift)  # h * (1 + s) + b
        h = ad.conv2d(ad.silu(h), blk["c2_w"], blk["c2_b"])
        return ad.add(x, h)

    def _cross_attention(self, x: Tensor, c: Tensor, blk) -> tuple[Tensor, Tensor]:
        n, f, h, w = x.data.shape
        flat = ad.transpose(ad.reshape(x, (n, f, h * w)), (0, 2, 1))  # (N, hw, f)
        q = ad.matmul(flat, blk["wq"])  # (N, hw, d')
        k = ad.matmul(c, blk["wk"])  # (N, n_tok, d')
        v = ad.matmul(c, blk["wv"])
        logits = ad.mul(
            ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.d_attn)
        )
        a = ad.softmax(logits, axis=-1)  # (N, hw, n_tok) rows sum to 1
        z_attn = ad.matmul(ad.matmul(a, v), blk["wo"])  # back to f channels
        out = ad.add(flat, z_attn)
        out = ad.reshape(ad.transpose(out, (0, 2, 1)), (n, f, h, w))
        return out, a

    def predict(self, z_t: Tensor | np.ndarray, t, c: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Noise estimate and attention stack for a batch.

        z_t: (N, 3, 32, 32); t: scalar or (N,) 1-based timesteps;
        c: (N, n_tok, d) conditioning.
        """
        if not isinstance(z_t, Tensor):
            z_t = Tensor(np.asarray(z_t, dtype=DTYPE))
        n = z_t.data.shape[0]
        if c.data.ndim != 3 or c.data.shape[0] != n:
            raise ShapeMismatch(f"conditioning {c.data.shape} vs batch {n}")
        t = np.broadcast_to(np.asarray(t), (n,))
        temb = Tensor(timestep_embedding(t, self.t_dim))
        temb = ad.add(ad.matmul(temb, self.t_w1), self.t_b1)
        temb = ad.silu(temb)
        temb = ad.add(ad.matmul(temb, self.t_w2), self.t_b2)

        cpool = ad.mean(c, axis=1)  # (N, d) token mean
        cpool = ad.silu(ad.add(ad.matmul(cpool, self.c_w1), self.c_b1))
        cpool = ad.add(ad.matmul(cpool, self.c_w2), self.c_b2)
        temb = ad.add(temb, cpool)

        h0 = ad.add(ad.conv2d(z_t, self.enc0_w, self.enc0_b), self.pos0)
        h0 = self._resblock(h0, self.res0, temb)  # (N,c1,32,32)

        h1 = ad.add(ad.conv2d(h0, self.down1_w, self.down1_b, stride=2), self.pos1)
        h1 = self._resblock(h1, self.res1, temb)  # (N,c2,16,16)
        h1, a1 = self._cross_attention(h1, c, self.attn[0])

        h2 = ad.conv2d(h1, self.down2_w, self.down2_b, stride=2)
        h2 = self._resblock(h2, self.res2, temb)  # (N,c2,8,8)
        h2, a2 = self._cross_attention(h2, c, self.attn[1])

        m = self._resblock(h2, self.mid, temb)

        u1 = ad.conv2d(ad.upsample_nearest2(m), self.up1_w, self.up1_b)  # 16
        u1 = self._resblock(ad.add(u1, h1), self.res3, temb)

        u2 = ad.conv2d(ad.upsample_nearest2(u1), self.up2_w, self.up2_b)  # 32
        u2 = self._resblock(ad.add(u2, h0), self.res4, temb)

        u2 = ad.silu(ad.channel_norm(u2, self.out_ng, self.out_nb))
        eps_hat = ad.conv2d(u2, self.out_w, self.out_b)
        if self.sched is not None:
            # residual form around the analytic zero-signal baseline
            # sqrt(1 - ab_t) * z_t, the optimal noise estimate when z_t
            # carries no usable signal; this keeps the high-noise regime
            # stable instead of asking the conv stack to learn an
            # identity map on raw noise
            ab = np.asarray(self.sched.alpha_bar(t), dtype=z_t.data.dtype)
            coef = np.sqrt(1.0 - ab).reshape(n, 1, 1, 1)
            eps_hat = ad.add(eps_hat, ad.mul(z_t, Tensor(coef)))
        return eps_hat, [a1, a2]


def noise_loss(eps: np.ndarray | Tensor, eps_hat: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if not isinstance(eps, Tensor):
        eps = Tensor(np.asarray(eps, dtype=eps_hat.data.dtype))
    if eps.data.shape != eps_hat.data.shape:
        raise ShapeMismatch(f"{eps.data.shape} vs {eps_hat.data.shape}")
    diff = ad.add(eps_hat, ad.mul(eps, -1.0))
    return ad.mean(ad.mul(diff, diff))
