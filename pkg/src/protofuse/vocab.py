"""Token vocabulary for the glyph-world prompt language.

The language is deliberately tiny: color/texture/shape attributes, six
object nouns, and a handful of function words.  Every word is a single
token; token ids are dense in [0, len(vocab)).
"""

from __future__ import annotations

import json
from enum import Enum


class Category(Enum):
    ATTR_COLOR = "ATTR_COLOR"
    ATTR_TEXTURE = "ATTR_TEXTURE"
    ATTR_SHAPE = "ATTR_SHAPE"
    OBJECT = "OBJECT"
    FUNCTION = "FUNCTION"


ATTR_CATEGORIES = (Category.ATTR_COLOR, Category.ATTR_TEXTURE, Category.ATTR_SHAPE)

COLOR_WORDS = ("red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white")
TEXTURE_WORDS = ("solid", "striped", "dotted")
SHAPE_WORDS = ("round", "square", "triangular", "cross")
OBJECT_WORDS = ("car", "bicycle", "apple", "backpack", "disc", "ring")
FUNCTION_WORDS = ("a", "and", ",", "photo", "of")


class UnknownToken(KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self):
        return f"word not in vocabulary: {self.word!r}"


class Vocabulary:
    """Bijective word <-> id table with a category per token."""

    def __init__(self, words_by_category: dict[Category, tuple[str, ...]]):
        self.word_to_id: dict[str, int] = {}
        self.id_to_word: list[str] = []
        self.category: dict[int, Category] = {}
        for cat, words in words_by_category.items():
            for w in words:
                if w in self.word_to_id:
                    raise ValueError(f"duplicate word {w!r}")
                tid = len(self.id_to_word)
                self.word_to_id[w] = tid
                self.id_to_word.append(w)
                self.category[tid] = cat

    def __len__(self) -> int:
        return len(self.id_to_word)

    def id(self, word: str) -> int:
        try:
            return self.word_to_id[word]
        except KeyError:
            raise UnknownToken(word) from None

    def word(self, tid: int) -> str:
        return self.id_to_word[tid]

    def cat(self, tid: int) -> Category:
        return self.category[tid]

    def ids_in(self, cat: Category) -> list[int]:
        return [i for i in range(len(self)) if self.category[i] is cat]

    def attr_ids(self) -> list[int]:
        return [i for i in range(len(self)) if self.category[i] in ATTR_CATEGORIES]

    # -- JSON serialization ------------------------------------------------

    def to_json(self) -> str:
        rows = [
            {"word": w, "id": i, "category": self.category[i].value}
            for i, w in enumerate(self.id_to_word)
        ]
        return json.dumps({"tokens": rows}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        rows = sorted(doc["tokens"], key=lambda r: r["id"])
        if [r["id"] for r in rows] != list(range(len(rows))):
            raise ValueError("token ids must be dense in [0, n)")
        vocab = cls.__new__(cls)
        vocab.word_to_id = {}
        vocab.id_to_word = []
        vocab.category = {}
        for r in rows:
            vocab.word_to_id[r["word"]] = r["id"]
            vocab.id_to_word.append(r["word"])
            vocab.category[r["id"]] = Category(r["category"])
        return vocab


def default_vocabulary() -> Vocabulary:
    return Vocabulary(
        {
            Category.FUNCTION: FUNCTION_WORDS,
            Category.ATTR_COLOR: COLOR_WORDS,
            Category.ATTR_TEXTURE: TEXTURE_WORDS,
            Category.ATTR_SHAPE: SHAPE_WORDS,
            Category.OBJECT: OBJECT_WORDS,
        }
    )
