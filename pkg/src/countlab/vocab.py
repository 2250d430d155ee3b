"""Closed word-level vocabulary shared by the text and visual tasks."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

FRUITS = ("apple", "orange", "peach", "fig", "mango", "pear", "coconut", "cherry", "plum")
FRUIT_PLURALS = {
    "apple": "apples",
    "orange": "oranges",
    "peach": "peaches",
    "fig": "figs",
    "mango": "mangos",
    "pear": "pears",
    "coconut": "coconuts",
    "cherry": "cherries",
    "plum": "plums",
}
SHAPES = ("circle", "triangle", "square", "pentagon", "hexagon", "star", "diamond", "cross", "heart")
COLORS = ("blue", "green", "red", "yellow", "orange", "brown", "purple", "cyan")
ALT_SEPARATORS = (";", "|", "and")

BOS, EOS, PAD = "<bos>", "<eos>", "<pad>"
PLACEHOLDER = "<ph>"
BACKGROUND = "<bg>"
DIGITS = tuple(str(i) for i in range(1, 10))

_QUESTION_WORDS = (
    "Question", ":", "?", ".", "How", "many", "items", "objects", "are", "there",
    "in", "the", "following", "above", "sentence", "image",
)


def cell_token(shape: str, color: str) -> str:
    return f"{color}-{shape}"


def shape_plural(shape: str) -> str:
    return shape + ("es" if shape.endswith("s") else "s")


def _token_list() -> list[str]:
    toks = [BOS, EOS, PAD, PLACEHOLDER]
    toks += list(DIGITS)
    toks += [","] + list(ALT_SEPARATORS)
    toks += list(_QUESTION_WORDS)
    toks += list(FRUITS) + [FRUIT_PLURALS[f] for f in FRUITS]
    toks += [c for c in COLORS if c not in toks]
    toks += [shape_plural(s) for s in SHAPES]
    toks += [BACKGROUND] + [cell_token(s, c) for s in SHAPES for c in COLORS]
    return toks


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate token strings in vocabulary")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def ids(self, tokens) -> list[int]:
        return [self.id(t) for t in tokens]

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def digit_ids(self) -> list[int]:
        return [self.id(d) for d in DIGITS]

    @property
    def separator_id(self) -> int:
        return self.id(",")

    @property
    def placeholder_id(self) -> int:
        return self.id(PLACEHOLDER)

    @property
    def patch_ids(self) -> list[int]:
        return [self.id(BACKGROUND)] + [self.id(cell_token(s, c)) for s in SHAPES for c in COLORS]

    @property
    def special_ids(self) -> dict[str, int]:
        return {"begin": self.id(BOS), "end": self.id(EOS), "pad": self.id(PAD)}

    def digit_id(self, n: int) -> int | None:
        """Token id for the answer ``n``; None when ``n`` has no single-digit token."""
        if 1 <= n <= 9:
            return self.id(str(n))
        return None


@lru_cache(maxsize=None)
def default_vocab() -> Vocabulary:
    return Vocabulary(tuple(_token_list()))


_WORD_RE = re.compile(r"<[a-z]+>|[A-Za-z0-9\-]+|[,;:?.|]")


def tokenize(text: str, vocab: Vocabulary | None = None) -> list[int]:
    """Split rendered text back into vocabulary ids (whitespace is not a token)."""
    vocab = vocab or default_vocab()
    pieces = _WORD_RE.findall(text)
    leftover = _WORD_RE.sub("", text)
    if leftover.strip():
        raise ValueError(f"untokenizable text: {leftover.strip()!r}")
    return vocab.ids(pieces)


_NO_SPACE_BEFORE = {",", ";", ":", "?", "."}


def detokenize(tokens: list[str]) -> str:
    """Join word tokens with English spacing (no space before punctuation)."""
    out = ""
    for tok in tokens:
        if not out or tok in _NO_SPACE_BEFORE:
            out += tok
        else:
            out += " " + tok
    return out
