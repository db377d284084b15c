"""Prompt tokenization, binding-pair extraction, and canonical rendering.

A prompt is a flat sequence of tokens; binding pairs are recovered by
scanning for an attribute token immediately followed (function words are
transparent) by an object noun.  The index set collects attribute and
object positions in pair order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .vocab import ATTR_CATEGORIES, Category, Vocabulary

N_MAX_DEFAULT = 32


class GrammarError(ValueError):
    pass


class NoPairsFound(GrammarError):
    pass


class DanglingAttribute(GrammarError):
    def __init__(self, position: int):
        super().__init__(f"attribute at position {position} has no following object")
        self.position = position


class PromptTooLong(GrammarError):
    pass


@dataclass(frozen=True)
class BindingPair:
    attr_token: int
    obj_token: int
    attr_index: int
    obj_index: int
    pair_id: int

    def words(self, vocab: Vocabulary) -> tuple[str, str]:
        return vocab.word(self.attr_token), vocab.word(self.obj_token)


@dataclass(frozen=True)
class PromptParse:
    tokens: tuple[int, ...]
    pairs: tuple[BindingPair, ...]
    index_set: tuple[int, ...] = field(default=())

    def __post_init__(self):
        idx = tuple(
            i for p in self.pairs for i in (p.attr_index, p.obj_index)
        )
        object.__setattr__(self, "index_set", tuple(sorted(idx)))
        if len(set(idx)) != 2 * len(self.pairs):
            raise GrammarError("pair indices must be pairwise distinct")


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Split on whitespace, treating ',' as its own token; lowercase-folds."""
    words: list[str] = []
    for raw in text.lower().split():
        while raw.endswith(","):
            raw = raw[:-1]
            if raw:
                words.append(raw)
            words.append(",")
            raw = ""
        if raw:
            words.append(raw)
    return [vocab.id(w) for w in words]


def parse_pairs(
    tokens: list[int] | tuple[int, ...],
    vocab: Vocabulary,
    n_max: int = N_MAX_DEFAULT,
) -> PromptParse:
    """Recover attribute-object pairs by left-to-right scan.

    Function words between an attribute and its object are transparent;
    an attribute followed by another attribute (or end of prompt) before
    any object is a parse error.
    """
    if not tokens:
        raise NoPairsFound("empty token sequence")
    if len(tokens) > n_max:
        raise PromptTooLong(f"{len(tokens)} tokens > n_max={n_max}")
    pairs: list[BindingPair] = []
    pending: tuple[int, int] | None = None  # (attr_token, attr_index)
    for i, tid in enumerate(tokens):
        cat = vocab.cat(tid)
        if cat in ATTR_CATEGORIES:
            if pending is not None:
                raise DanglingAttribute(pending[1])
            pending = (tid, i)
        elif cat is Category.OBJECT:
            if pending is None:
                continue  # bare noun: not a binding pair
            pairs.append(
                BindingPair(
                    attr_token=pending[0],
                    obj_token=tid,
                    attr_index=pending[1],
                    obj_index=i,
                    pair_id=len(pairs),
                )
            )
            pending = None
        # FUNCTION tokens are transparent
    if pending is not None:
        raise DanglingAttribute(pending[1])
    if not pairs:
        raise NoPairsFound("no attribute-object pair in prompt")
    return PromptParse(tokens=tuple(tokens), pairs=tuple(pairs))


def canonical_prompt(pairs, vocab: Vocabulary) -> str:
    """Render ``a <attr> <obj>, ..., a <attr> <obj>`` with 'and' before the last."""
    if not pairs:
        raise GrammarError("need at least one pair")
    chunks = [f"a {vocab.word(a)} {vocab.word(o)}" for a, o in _as_token_pairs(pairs)]
    if len(chunks) == 1:
        return chunks[0]
    return ", ".join(chunks[:-1]) + " and " + chunks[-1]


def single_pair_prompt(pair, vocab: Vocabulary) -> str:
    (a, o), = _as_token_pairs([pair])
    return f"a {vocab.word(a)} {vocab.word(o)}"


def parse_prompt(text: str, vocab: Vocabulary, n_max: int = N_MAX_DEFAULT) -> PromptParse:
    return parse_pairs(tokenize(text, vocab), vocab, n_max=n_max)


def _as_token_pairs(pairs) -> list[tuple[int, int]]:
    out = []
    for p in pairs:
        if isinstance(p, BindingPair):
            out.append((p.attr_token, p.obj_token))
        else:
            a, o = p
            out.append((int(a), int(o)))
    return out
