"""Procedural glyph renderer with exact per-glyph segmentation masks.

A scene is a set of glyphs on a 2x3 placement grid over a 32x32 canvas.
Each glyph has a silhouette (from its shape attribute, or the noun's
default), a fill color (color attribute, default gray), a fill texture
(texture attribute, default solid), and a small corner marker that
identifies the noun independently of the attributes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vocab import Category, Vocabulary

CANVAS = 32
CHANNELS = 3
GRID_ROWS = 2
GRID_COLS = 3
CELL_H = 16
COL_ORIGINS = (0, 11, 22)
CELL_W = 10
BOX = 9  # silhouette box, local rows 6..14, cols 0..8
BOX_R0, BOX_C0 = 6, 0
MARK = 4  # marker box, local rows 1..4, cols 2..5
MARK_R0, MARK_C0 = 1, 2

BACKGROUND = -1.0
GRAY = (0.0, 0.0, 0.0)

PALETTE = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "cyan": (-1.0, 1.0, 1.0),
    "magenta": (1.0, -1.0, 1.0),
    "orange": (1.0, 0.0, -1.0),
    "white": (1.0, 1.0, 1.0),
}

NOUN_DEFAULT_SHAPE = {
    "car": "square",
    "bicycle": "triangular",
    "apple": "round",
    "backpack": "square",
    "disc": "round",
    "ring": "cross",
}

_MARKER_ROWS = {
    "car": ["1111", "0000", "1111", "0000"],
    "bicycle": ["1010", "1010", "1010", "1010"],
    "apple": ["1111", "0000", "0000", "1111"],
    "backpack": ["1010", "0101", "1010", "0101"],
    "disc": ["1100", "0110", "0011", "0001"],
    "ring": ["1111", "1001", "1001", "1111"],
}


class WorldError(ValueError):
    pass


class TooManyPairs(WorldError):
    pass


class OverlapError(WorldError):
    pass


def _silhouettes() -> dict[str, np.ndarray]:
    rr, cc = np.mgrid[0:BOX, 0:BOX]
    round_ = ((rr - 4) ** 2 + (cc - 4) ** 2) <= 4.5**2
    square = (rr >= 1) & (rr <= 7) & (cc >= 1) & (cc <= 7)
    triangular = np.abs(cc - 4) <= (rr * 0.55)
    cross = ((rr >= 3) & (rr <= 5)) | ((cc >= 3) & (cc <= 5))
    return {
        "round": round_,
        "square": square,
        "triangular": triangular,
        "cross": cross,
    }


SILHOUETTES = _silhouettes()
SHAPE_NAMES = tuple(SILHOUETTES)
TEXTURE_NAMES = ("solid", "striped", "dotted")

MARKERS = {
    noun: np.array([[ch == "1" for ch in row] for row in rows], dtype=bool)
    for noun, rows in _MARKER_ROWS.items()
}


def texture_grid(texture: str, shape_mask: np.ndarray, row0: int, col0: int) -> np.ndarray:
    """Lit subset of a silhouette under a texture, in global row/col phase."""
    rr, cc = np.mgrid[0 : shape_mask.shape[0], 0 : shape_mask.shape[1]]
    rr = rr + row0
    cc = cc + col0
    if texture == "solid":
        lit = np.ones_like(shape_mask)
    elif texture == "striped":
        lit = rr % 2 == 0
    elif texture == "dotted":
        lit = (rr + cc) % 2 == 0
    else:
        raise WorldError(f"unknown texture {texture!r}")
    return shape_mask & lit


def textured_template(shape: str, texture: str, row: int, col: int) -> np.ndarray:
    """Lit-pixel template of a glyph body at grid cell (row, col)."""
    r0 = row * CELL_H + BOX_R0
    c0 = COL_ORIGINS[col] + BOX_C0
    return texture_grid(texture, SILHOUETTES[shape], r0, c0)


@dataclass(frozen=True)
class GlyphFacets:
    """Resolved appearance of one attribute-object pair."""

    noun: str
    color: str  # palette name or "gray"
    texture: str
    shape: str

    @classmethod
    def from_pair(cls, attr_tid: int, obj_tid: int, vocab: Vocabulary) -> "GlyphFacets":
        noun = vocab.word(obj_tid)
        attr = vocab.word(attr_tid)
        cat = vocab.cat(attr_tid)
        color, texture, shape = "gray", "solid", NOUN_DEFAULT_SHAPE[noun]
        if cat is Category.ATTR_COLOR:
            color = attr
        elif cat is Category.ATTR_TEXTURE:
            texture = attr
        elif cat is Category.ATTR_SHAPE:
            shape = attr
        else:
            raise WorldError(f"not an attribute token: {attr!r}")
        return cls(noun=noun, color=color, texture=texture, shape=shape)

    @property
    def fill(self) -> tuple[float, float, float]:
        return GRAY if self.color == "gray" else PALETTE[self.color]


@dataclass(frozen=True)
class SceneSpec:
    pairs: tuple[tuple[int, int], ...]  # (attr_tid, obj_tid)
    placements: tuple[tuple[int, int], ...]  # grid (row, col) per pair
    canvas: int = CANVAS

    def __post_init__(self):
        if not 1 <= len(self.pairs) <= 5:
            raise TooManyPairs(f"pair count {len(self.pairs)} outside [1, 5]")
        if len(set(self.placements)) != len(self.placements):
            raise WorldError("placements must be pairwise distinct")
        for r, c in self.placements:
            if not (0 <= r < GRID_ROWS and 0 <= c < GRID_COLS):
                raise WorldError(f"placement {(r, c)} off the grid")
        if len(self.placements) != len(self.pairs):
            raise WorldError("one placement per pair")


def sample_scene(rng_seed: int, n_pairs: int, categories, vocab: Vocabulary) -> SceneSpec:
    """Draw a random scene: distinct objects, attributes from the given categories."""
    if not 1 <= n_pairs <= 5:
        raise TooManyPairs(f"n_pairs {n_pairs} outside [1, 5]")
    rng = np.random.default_rng(rng_seed)
    cats = sorted(categories, key=lambda c: c.value)
    objs = rng.choice(vocab.ids_in(Category.OBJECT), size=n_pairs, replace=False)
    pairs = []
    for obj in objs:
        cat = cats[rng.integers(len(cats))]
        attr_ids = vocab.ids_in(cat)
        pairs.append((int(attr_ids[rng.integers(len(attr_ids))]), int(obj)))
    cells = [(r, c) for r in range(GRID_ROWS) for c in range(GRID_COLS)]
    chosen = rng.choice(len(cells), size=n_pairs, replace=False)
    placements = tuple(cells[i] for i in chosen)
    return SceneSpec(pairs=tuple(pairs), placements=placements)


def render_scene(spec: SceneSpec, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Render to a C x H x W image in [-1, 1] plus per-pair binary masks.

    The mask of a glyph is its full silhouette support plus its marker;
    textured glyphs leave background-valued pixels inside the mask.
    """
    img = np.full((CHANNELS, spec.canvas, spec.canvas), BACKGROUND, dtype=np.float32)
    masks = np.zeros((len(spec.pairs), spec.canvas, spec.canvas), dtype=bool)
    for j, ((attr, obj), (row, col)) in enumerate(zip(spec.pairs, spec.placements)):
        facets = GlyphFacets.from_pair(attr, obj, vocab)
        r0 = row * CELL_H + BOX_R0
        c0 = COL_ORIGINS[col] + BOX_C0
        shape = SILHOUETTES[facets.shape]
        lit = texture_grid(facets.texture, shape, r0, c0)
        mr0 = row * CELL_H + MARK_R0
        mc0 = COL_ORIGINS[col] + MARK_C0
        marker = MARKERS[facets.noun]

        mask = np.zeros((spec.canvas, spec.canvas), dtype=bool)
        mask[r0 : r0 + BOX, c0 : c0 + BOX] |= shape
        mask[mr0 : mr0 + MARK, mc0 : mc0 + MARK] |= marker
        if (masks.any(axis=0) & mask).any():
            raise OverlapError("glyph silhouettes intersect")
        masks[j] = mask

        fill = np.array(facets.fill, dtype=np.float32)
        for ch in range(CHANNELS):
            img[ch, r0 : r0 + BOX, c0 : c0 + BOX][lit] = fill[ch]
            img[ch, mr0 : mr0 + MARK, mc0 : mc0 + MARK][marker] = fill[ch]
    return img, masks
