"""Compositional glyph generation with pairwise visual-prototype fusion.

A self-contained toy text-to-image stack: a tiny prompt grammar, a
procedural glyph world with an exact detection oracle, a pixel-space
text-conditioned diffusion model, prototype-embedding fusion with
localization training, and an evaluation harness.
"""

__version__ = "0.1.0"
