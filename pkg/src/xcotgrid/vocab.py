"""Unified token space shared by text words, image colors and structural markers.

Layout (fixed, deterministic)::

    [0, 9)           structural markers
    [9, 9 + W)       text words
    [9 + W, 17 + W)  image color tokens, one per palette index
"""
from __future__ import annotations

import hashlib
import operator
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

STRUCTURAL = (
    "PAD",
    "BOS",
    "EOS",
    "SEP",
    "GEN",
    "THINK_OPEN",
    "THINK_CLOSE",
    "IMG_BEGIN",
    "IMG_END",
)

SUBJECT_NAMES = (
    "cat", "dog", "bird", "fish", "tree", "house", "car", "boat",
    "star", "moon", "sun", "cup", "key", "hat", "shoe", "bell",
)
# palette index -> name; 0-3 are background colors, 4-7 subject colors
COLOR_NAMES = ("white", "blue", "green", "gray", "red", "orange", "purple", "yellow")
POSITION_NAMES = (
    "top-left", "top", "top-right",
    "left", "center", "right",
    "bottom-left", "bottom", "bottom-right",
)
# prompt-side setting nouns, one per background palette index 0-3
BACKGROUND_NAMES = ("snow", "sky", "grass", "stone")
CONNECTIVES = (
    "at", "on", "background", "place", "the", "subject",
    "in", "with", "a", "of", "scene", "is",
)

WORDS: tuple[str, ...] = (
    SUBJECT_NAMES + COLOR_NAMES + POSITION_NAMES + BACKGROUND_NAMES + CONNECTIVES
)
N_COLORS = 8

PAD, BOS, EOS, SEP, GEN, THINK_OPEN, THINK_CLOSE, IMG_BEGIN, IMG_END = range(len(STRUCTURAL))


class VocabError(ValueError):
    pass


class UnknownWord(VocabError):
    def __init__(self, word: str):
        super().__init__(f"unknown word: {word!r}")
        self.word = word


class OutOfRange(VocabError):
    def __init__(self, token: int):
        super().__init__(f"token id out of range: {token!r}")
        self.token = token


@dataclass(frozen=True)
class Structural:
    name: str


@dataclass(frozen=True)
class TextWord:
    word: str


@dataclass(frozen=True)
class ImageColor:
    color_index: int


TokenKind = Structural | TextWord | ImageColor


class UnifiedVocab:
    """Immutable token table. Construct once and share."""

    def __init__(self, words: Sequence[str] = WORDS):
        if len(set(words)) != len(words):
            raise VocabError("duplicate word in vocabulary")
        self.words = tuple(words)
        self.n_structural = len(STRUCTURAL)
        self.n_words = len(self.words)
        self.image_offset = self.n_structural + self.n_words
        self.size = self.image_offset + N_COLORS
        self._word_to_id = {w: self.n_structural + i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return self.size

    # -- kinds ----------------------------------------------------------------
    def _check(self, token: int) -> int:
        try:
            t = operator.index(token)
        except TypeError:
            raise OutOfRange(token) from None
        if not 0 <= t < self.size:
            raise OutOfRange(token)
        return t

    def token_kind(self, token: int) -> TokenKind:
        token = self._check(token)
        if token < self.n_structural:
            return Structural(STRUCTURAL[token])
        if token < self.image_offset:
            return TextWord(self.words[token - self.n_structural])
        return ImageColor(token - self.image_offset)

    def is_text(self, token: int) -> bool:
        return self.n_structural <= token < self.image_offset

    def is_color(self, token: int) -> bool:
        return self.image_offset <= token < self.size

    # -- codecs ---------------------------------------------------------------
    def word_id(self, word: str) -> int:
        try:
            return self._word_to_id[word]
        except KeyError:
            raise UnknownWord(word) from None

    def encode_text(self, words: Iterable[str]) -> list[int]:
        return [self.word_id(w) for w in words]

    def decode_words(self, tokens: Iterable[int]) -> list[str]:
        out = []
        for t in tokens:
            kind = self.token_kind(t)
            if not isinstance(kind, TextWord):
                raise VocabError(f"token {t} is not a text word")
            out.append(kind.word)
        return out

    def color_token(self, color_index: int) -> int:
        if not 0 <= color_index < N_COLORS:
            raise VocabError(f"color index out of range: {color_index}")
        return self.image_offset + color_index

    def encode_image(self, cells) -> list[int]:
        return [self.image_offset + int(c) for c in cells]

    def decode_image(self, tokens: Sequence[int]) -> list[int]:
        return [self._check(t) - self.image_offset for t in tokens]

    def surface(self, token: int) -> str:
        kind = self.token_kind(token)
        if isinstance(kind, Structural):
            return f"[{kind.name}]"
        if isinstance(kind, TextWord):
            return kind.word
        return f"#{kind.color_index}"

    def decode(self, tokens: Iterable[int]) -> str:
        return " ".join(self.surface(t) for t in tokens)

    # -- persistence ----------------------------------------------------------
    def dump(self) -> str:
        """Tab-separated table, one ``<id>\\t<kind>\\t<surface>`` line per token."""
        lines = []
        for t in range(self.size):
            kind = self.token_kind(t)
            label = {Structural: "structural", TextWord: "text", ImageColor: "image"}[type(kind)]
            lines.append(f"{t}\t{label}\t{self.surface(t)}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.dump().encode("utf-8")).hexdigest()


@lru_cache(maxsize=1)
def default_vocab() -> UnifiedVocab:
    return UnifiedVocab()
