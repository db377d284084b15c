"""Deterministic glyph detector and scoring oracle.

Detection is template cross-correlation of the binarized foreground
against every (shape, texture) body template at every grid cell (with a
+-1 pixel offset search), thresholded at 0.8 normalized correlation.
Color is classified by nearest palette entry, texture by row-period
analysis, and the noun by corner-marker correlation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grammar import PromptParse
from .render import (
    BOX,
    BOX_C0,
    BOX_R0,
    CELL_H,
    COL_ORIGINS,
    GRAY,
    GRID_COLS,
    GRID_ROWS,
    MARK,
    MARK_C0,
    MARK_R0,
    MARKERS,
    PALETTE,
    SHAPE_NAMES,
    TEXTURE_NAMES,
    SILHOUETTES,
    WorldError,
    texture_grid,
)
from .vocab import Category, Vocabulary

DETECT_THRESHOLD = 0.8
FOREGROUND_LUM = -0.5


class EmptyMask(WorldError):
    pass


@dataclass(frozen=True)
class Detection:
    color: str
    texture: str
    shape: str
    noun: str
    region: tuple[int, int]  # grid cell (row, col)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a @ a) * (b @ b))
    if denom == 0:
        return 0.0
    return float(a @ b / denom)


def foreground(image: np.ndarray) -> np.ndarray:
    """Binary lit-pixel map: mean channel value above the midpoint."""
    return image.mean(axis=0) > FOREGROUND_LUM


def _body_patch(fg: np.ndarray, row: int, col: int, dy: int, dx: int) -> np.ndarray | None:
    r0 = row * CELL_H + BOX_R0 + dy
    c0 = COL_ORIGINS[col] + BOX_C0 + dx
    if r0 < 0 or c0 < 0 or r0 + BOX > fg.shape[0] or c0 + BOX > fg.shape[1]:
        return None
    return fg[r0 : r0 + BOX, c0 : c0 + BOX]

def _body_match(fg: np.ndarray, row: int, col: int) -> tuple[float, str, str, int, int]:
    """Best (correlation, shape, texture, dy, dx) over templates and offsets."""
    best = (-2.0, "", "", 0, 0)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            patch = _body_patch(fg, row, col, dy, dx)
            if patch is None:
                continue
            for shape in SHAPE_NAMES:
                for texture in TEXTURE_NAMES:
                    tpl = texture_grid(
                        texture,
                        SILHOUETTES[shape],
                        row * CELL_H + BOX_R0 + dy,
                        COL_ORIGINS[col] + BOX_C0 + dx,
                    )
                    score = _pearson(patch, tpl)
                    if score > best[0]:
                        best = (score, shape, texture, dy, dx)
    return best


def _classify_color(image: np.ndarray, lit: np.ndarray) -> str:
    if not lit.any():
        return "gray"
    mean_rgb = image[:, lit].mean(axis=1)
    entries = [("gray", GRAY)] + list(PALETTE.items())
    dists = [np.linalg.norm(mean_rgb - np.array(rgb)) for _, rgb in entries]
    return entries[int(np.argmin(dists))][0]


def _classify_texture(fg_box: np.ndarray, silhouette: np.ndarray, row0: int) -> str:
    """Row-period analysis of lit fraction inside the silhouette."""
    fills, parities = [], []
    for r in range(BOX):
        n = silhouette[r].sum()
        if n == 0:
            continue
        fills.append(fg_box[r][silhouette[r]].mean())
        parities.append((row0 + r) % 2)
    fills = np.array(fills)
    parities = np.array(parities)
    if fills.mean() >= 0.75:
        return "solid"
    even = fills[parities == 0]
    odd = fills[parities == 1]
    if len(even) and len(odd) and abs(even.mean() - odd.mean()) >= 0.4:
        return "striped"
    return "dotted"


def _classify_noun(fg: np.ndarray, row: int, col: int, dy: int, dx: int) -> str:
    r0 = row * CELL_H + MARK_R0 + dy
    c0 = COL_ORIGINS[col] + MARK_C0 + dx
    patch = fg[r0 : r0 + MARK, c0 : c0 + MARK]
    scores = {noun: _pearson(patch, tpl) for noun, tpl in MARKERS.items()}
    return max(scores, key=lambda k: (scores[k], k))


def oracle_detect(image: np.ndarray) -> set[Detection]:
    """Detect all glyphs in an image; empty set when nothing matches."""
    fg = foreground(image)
    out: set[Detection] = set()
    for row in range(GRID_ROWS):
        for col in range(GRID_COLS):
            score, shape, texture, dy, dx = _body_match(fg, row, col)
            if score < DETECT_THRESHOLD:
                continue
            r0 = row * CELL_H + BOX_R0 + dy
            c0 = COL_ORIGINS[col] + BOX_C0 + dx
            fg_box = fg[r0 : r0 + BOX, c0 : c0 + BOX]
            sil = SILHOUETTES[shape]
            lit = np.zeros_like(fg)
            lit[r0 : r0 + BOX, c0 : c0 + BOX] = texture_grid(texture, sil, r0, c0) & fg_box
            out.add(
                Detection(
                    color=_classify_color(image, lit),
                    texture=_classify_texture(fg_box, sil, r0),
                    shape=shape,
                    noun=_classify_noun(fg, row, col, dy, dx),
                    region=(row, col),
                )
            )
    return out


def _pair_matches(det: Detection, attr_word: str, cat: Category, noun: str) -> bool:
    if det.noun != noun:
        return False
    if cat is Category.ATTR_COLOR:
        return det.color == attr_word
    if cat is Category.ATTR_TEXTURE:
        return det.texture == attr_word
    if cat is Category.ATTR_SHAPE:
        return det.shape == attr_word
    raise WorldError(f"not an attribute category: {cat}")


def binding_score(image: np.ndarray, parse: PromptParse, vocab: Vocabulary) -> float:
    """Fraction of prompt pairs realized correctly in the image.

    Each detection can satisfy at most one pair (greedy first-fit in
    pair order), so duplicated nouns are not double counted.
    """
    detections = sorted(oracle_detect(image), key=lambda d: d.region)
    used = [False] * len(detections)
    hits = 0
    for pair in parse.pairs:
        attr_word = vocab.word(pair.attr_token)
        cat = vocab.cat(pair.attr_token)
        noun = vocab.word(pair.obj_token)
        for i, det in enumerate(detections):
            if not used[i] and _pair_matches(det, attr_word, cat, noun):
                used[i] = True
                hits += 1
                break
    return hits / len(parse.pairs)


def oracle_alignment(
    image: np.ndarray, mask: np.ndarray, pair: tuple[int, int], vocab: Vocabulary
) -> float:
    """Alignment in [0, 1] between a mask region and an attribute-object pair.

    Product of a color score (linear in RGB distance), a texture-class
    match, and the silhouette correlation of the masked foreground with
    the pair's expected body template.
    """
    if not mask.any():
        raise EmptyMask("mask has no pixels")
    from .render import GlyphFacets

    facets = GlyphFacets.from_pair(pair[0], pair[1], vocab)
    fg = foreground(image) & mask

    # locate the grid cell holding the mask
    ys, xs = np.nonzero(mask)
    row = int(np.round(ys.mean())) // CELL_H
    cmid = int(np.round(xs.mean()))
    col = min(range(GRID_COLS), key=lambda c: abs(COL_ORIGINS[c] + 5 - cmid))
    row = min(row, GRID_ROWS - 1)

    # silhouette score: masked foreground vs expected textured body
    best = 0.0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            patch = _body_patch(fg, row, col, dy, dx)
            if patch is None:
                continue
            tpl = texture_grid(
                facets.texture,
                SILHOUETTES[facets.shape],
                row * CELL_H + BOX_R0 + dy,
                COL_ORIGINS[col] + BOX_C0 + dx,
            )
            best = max(best, _pearson(patch, tpl))
    sil_score = max(0.0, best)

    # color score: linear in distance between mean lit color and the fill
    if fg.any():
        mean_rgb = image[:, fg].mean(axis=1)
    else:
        mean_rgb = np.full(3, -1.0)
    dist = float(np.linalg.norm(mean_rgb - np.array(facets.fill)))
    color_score = max(0.0, 1.0 - dist / (2.0 * np.sqrt(3.0)))

    # texture score: row-period class match within the located body box
    r0 = row * CELL_H + BOX_R0
    c0 = COL_ORIGINS[col] + BOX_C0
    fg_box = foreground(image)[r0 : r0 + BOX, c0 : c0 + BOX]
    tex = _classify_texture(fg_box, SILHOUETTES[facets.shape], r0)
    texture_score = 1.0 if tex == facets.texture else 0.0

    return sil_score * color_score * texture_score


def greedy_assign(scores: np.ndarray) -> dict[int, int]:
    """Injective partial map mask-row -> pair-column by repeated global argmax.

    Ties break toward the lowest (mask index, pair index).  Rows and
    columns are consumed once assigned; assignment size is
    min(n_masks, n_pairs).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError("expected a 2-D score matrix")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    n_masks, n_pairs = scores.shape
    free_rows = set(range(n_masks))
    free_cols = set(range(n_pairs))
    out: dict[int, int] = {}
    while free_rows and free_cols:
        best = None
        for i in sorted(free_rows):
            for j in sorted(free_cols):
                if best is None or scores[i, j] > scores[best[0], best[1]]:
                    best = (i, j)
        i, j = best
        out[i] = j
        free_rows.remove(i)
        free_cols.remove(j)
    return out
