"""Text embedder: token lookup, position table, one self-mixing layer.

The unmasked single-head self-attention layer deliberately spreads each
token's content across the sequence, so the downstream denoiser sees a
partially order-blind summary of the prompt.  Its strength is a config
scalar; zeroing the output projection reduces the encoder to plain
lookup plus position.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import DTYPE, ParamStore, linear_init


class SequenceTooLong(ValueError):
    pass


class TextEmbedder(ParamStore):
    def __init__(self, vocab_size: int, d: int = 64, n_max: int = 32, mixing: float = 1.0, seed: int = 0):
        super().__init__()
        self.d = d
        self.n_max = n_max
        self.mixing = mixing
        rng = np.random.default_rng(seed)
        self.emb = self.param("text.emb", rng.normal(0, 1.0, size=(vocab_size, d)))
        self.pos = self.param("text.pos", rng.normal(0, 0.3, size=(n_max, d)))
        self.wq = self.param("text.wq", linear_init(rng, d, d))
        self.wk = self.param("text.wk", linear_init(rng, d, d))
        self.wv = self.param("text.wv", linear_init(rng, d, d))
        self.wo = self.param("text.wo", linear_init(rng, d, d))

    def encode(self, tokens) -> Tensor:
        """Embed one token sequence to an (n, d) conditioning matrix."""
        tokens = list(tokens)
        n = len(tokens)
        if n > self.n_max:
            raise SequenceTooLong(f"{n} tokens > n_max={self.n_max}")
        c0 = ad.add(
            ad.gather_rows(self.emb, tokens),
            ad.gather_rows(self.pos, list(range(n))),
        )
        q = ad.matmul(c0, self.wq)
        k = ad.matmul(c0, self.wk)
        v = ad.matmul(c0, self.wv)
        logits = ad.mul(ad.matmul(q, ad.transpose(k, (1, 0))), 1.0 / np.sqrt(self.d))
        attn = ad.softmax(logits, axis=-1)
        mixed = ad.matmul(ad.matmul(attn, v), self.wo)
        return ad.add(c0, ad.mul(mixed, float(self.mixing)))

    def encode_batch(self, token_rows) -> Tensor:
        """Encode a batch of equal-length sequences to (N, n, d)."""
        outs = [ad.reshape(self.encode(row), (1, len(row), self.d)) for row in token_rows]
        return outs[0] if len(outs) == 1 else ad.concat(outs, axis=0)
