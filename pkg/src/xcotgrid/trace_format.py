"""Finite-state validator, segmenter and serializer for reasoning traces.

Accepted language::

    THINK_OPEN text+ IMG_BEGIN color{64} IMG_END text+ THINK_CLOSE IMG_BEGIN color{64} IMG_END EOS
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .vocab import (
    EOS,
    IMG_BEGIN,
    IMG_END,
    STRUCTURAL,
    THINK_CLOSE,
    THINK_OPEN,
    UnifiedVocab,
    default_vocab,
)
from .world import N_CELLS, as_grid


class FailureReason(str, enum.Enum):
    UNEXPECTED_KIND = "UnexpectedKind"
    WRONG_IMAGE_LENGTH = "WrongImageLength"
    MISSING_DELIMITER = "MissingDelimiter"
    TRAILING_TOKENS = "TrailingTokens"
    TRUNCATED = "Truncated"


class ParseOnInvalid(ValueError):
    pass


@dataclass(frozen=True)
class ValidationResult:
    accepted: bool
    failure_position: int | None = None
    failure_reason: FailureReason | None = None

    def __bool__(self) -> bool:
        return self.accepted

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "failure_position": self.failure_position,
            "failure_reason": None if self.failure_reason is None else self.failure_reason.value,
        }


class Phase(enum.IntEnum):
    OPEN = 0
    THINK_A = 1
    FOCUS = 2
    THINK_B = 3
    RESULT_BEGIN = 4
    RESULT = 5
    EOS = 6
    DONE = 7


_DELIMITER_STEPS = {
    Phase.OPEN: (THINK_OPEN, Phase.THINK_A),
    Phase.RESULT_BEGIN: (IMG_BEGIN, Phase.RESULT),
    Phase.EOS: (EOS, Phase.DONE),
}


_STRUCT, _TEXT, _COLOR = 0, 1, 2
_IMAGE_PHASES = frozenset((int(Phase.FOCUS), int(Phase.RESULT)))


@functools.lru_cache(maxsize=None)
def _kind_table(vocab: UnifiedVocab) -> bytes:
    return bytes(_TEXT if vocab.is_text(t) else _COLOR if vocab.is_color(t) else _STRUCT
                 for t in range(vocab.size))


class TraceFSM:
    """Left-to-right recognizer. ``count`` is words seen in text phases, cells in image phases."""

    __slots__ = ("vocab", "phase", "count", "_kinds")

    def __init__(self, vocab: UnifiedVocab | None = None):
        self.vocab = vocab or default_vocab()
        self.phase = Phase.OPEN
        self.count = 0
        self._kinds = _kind_table(self.vocab)

    def copy(self) -> "TraceFSM":
        other = TraceFSM(self.vocab)
        other.phase, other.count = self.phase, self.count
        return other

    @property
    def done(self) -> bool:
        return self.phase == Phase.DONE

    def min_remaining(self) -> int:
        """Fewest tokens that can complete the trace from here."""
        p, n = self.phase, self.count
        image_tail = N_CELLS + 2  # payload + IMG_END + (next delimiter or EOS)
        if p == Phase.OPEN:
            return 1 + 1 + 1 + N_CELLS + 1 + 1 + 1 + 1 + image_tail
        if p == Phase.THINK_A:
            return (0 if n else 1) + 1 + N_CELLS + 1 + 1 + 1 + 1 + image_tail
        if p == Phase.FOCUS:
            return N_CELLS - n + 1 + 1 + 1 + 1 + image_tail
        if p == Phase.THINK_B:
            return (0 if n else 1) + 1 + 1 + image_tail
        if p == Phase.RESULT_BEGIN:
            return 1 + image_tail
        if p == Phase.RESULT:
            return N_CELLS - n + 2
        return 1 if p == Phase.EOS else 0

    def step(self, token: int) -> FailureReason | None:
        """Consume ``token``; on rejection return the reason and leave the state unchanged."""
        p, n = self.phase, self.count
        kind = self._kinds[token]
        if kind == _COLOR and n < N_CELLS and p in _IMAGE_PHASES:
            self.count = n + 1  # image payload, the common case
            return None
        is_text, is_color = kind == _TEXT, kind == _COLOR
        if p == Phase.DONE:
            return FailureReason.TRAILING_TOKENS
        if p in (Phase.OPEN, Phase.RESULT_BEGIN, Phase.EOS):
            want, nxt = _DELIMITER_STEPS[p]
            if token != want:
                return FailureReason.MISSING_DELIMITER
            self.phase, self.count = nxt, 0
            return None
        if p in (Phase.THINK_A, Phase.THINK_B):
            if is_text:
                self.count += 1
                return None
            closer = IMG_BEGIN if p == Phase.THINK_A else THINK_CLOSE
            if n == 0 or is_color:
                return FailureReason.UNEXPECTED_KIND
            if token != closer:
                return FailureReason.MISSING_DELIMITER
            self.phase = Phase.FOCUS if p == Phase.THINK_A else Phase.RESULT_BEGIN
            self.count = 0
            return None
        # image payload
        if n < N_CELLS:
            if is_color:
                self.count += 1
                return None
            return FailureReason.WRONG_IMAGE_LENGTH if token == IMG_END else FailureReason.UNEXPECTED_KIND
        if token == IMG_END:
            self.phase = Phase.THINK_B if p == Phase.FOCUS else Phase.EOS
            self.count = 0
            return None
        return FailureReason.WRONG_IMAGE_LENGTH if is_color else FailureReason.MISSING_DELIMITER

    def allowed_tokens(self, budget: int | None = None) -> np.ndarray:
        """Boolean mask over the vocabulary of tokens that keep the trace completable.

        ``budget`` counts the tokens still permitted including the next one.
        """
        mask = np.zeros(self.vocab.size, dtype=bool)
        for t in self._candidates():
            nxt = self.copy()
            if nxt.step(t) is None and (budget is None or 1 + nxt.min_remaining() <= budget):
                mask[t] = True
        return mask

    def _candidates(self) -> range | list[int]:
        p, n = self.phase, self.count
        v = self.vocab
        text = list(range(v.n_structural, v.image_offset))
        colors = list(range(v.image_offset, v.size))
        if p == Phase.OPEN:
            return [THINK_OPEN]
        if p == Phase.THINK_A:
            return text + ([IMG_BEGIN] if n else [])
        if p == Phase.THINK_B:
            return text + ([THINK_CLOSE] if n else [])
        if p in (Phase.FOCUS, Phase.RESULT):
            return colors if n < N_CELLS else [IMG_END]
        if p == Phase.RESULT_BEGIN:
            return [IMG_BEGIN]
        if p == Phase.EOS:
            return [EOS]
        return []


def validate(tokens: Sequence[int], vocab: UnifiedVocab | None = None) -> ValidationResult:
    vocab = vocab or default_vocab()
    fsm = TraceFSM(vocab)
    size = vocab.size
    for i, t in enumerate(tokens):
        t = int(t)
        if not 0 <= t < size:
            vocab.token_kind(t)  # raises OutOfRange
        reason = fsm.step(t)
        if reason is not None:
            return ValidationResult(False, i, reason)
    if not fsm.done:
        return ValidationResult(False, len(tokens), FailureReason.TRUNCATED)
    return ValidationResult(True)


def valid_prefix_length(tokens: Sequence[int], vocab: UnifiedVocab | None = None) -> int:
    """Diagnostic only: length of the longest prefix that is still completable."""
    res = validate(tokens, vocab)
    return len(tokens) if res.accepted else int(res.failure_position)


@dataclass
class TraceSegments:
    think_a: list[int]
    focus_image: np.ndarray
    think_b: list[int]
    result_image: np.ndarray

    def __post_init__(self):
        vocab = default_vocab()
        for name in ("think_a", "think_b"):
            toks = getattr(self, name)
            if not toks:
                raise ValueError(f"{name} must be non-empty")
            if not all(vocab.is_text(t) for t in toks):
                raise ValueError(f"{name} must contain only text-word tokens")
        self.focus_image = as_grid(self.focus_image)
        self.result_image = as_grid(self.result_image)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TraceSegments):
            return NotImplemented
        return (
            list(self.think_a) == list(other.think_a)
            and list(self.think_b) == list(other.think_b)
            and np.array_equal(self.focus_image, other.focus_image)
            and np.array_equal(self.result_image, other.result_image)
        )


def parse(tokens: Sequence[int], vocab: UnifiedVocab | None = None) -> TraceSegments:
    vocab = vocab or default_vocab()
    res = validate(tokens, vocab)
    if not res.accepted:
        raise ParseOnInvalid(
            f"trace rejected at {res.failure_position}: {res.failure_reason.value}"
        )
    tokens = [int(t) for t in tokens]
    focus_start = tokens.index(IMG_BEGIN)
    think_a = tokens[1:focus_start]
    focus = tokens[focus_start + 1:focus_start + 1 + N_CELLS]
    b_start = focus_start + N_CELLS + 2
    close = tokens.index(THINK_CLOSE, b_start)
    think_b = tokens[b_start:close]
    result = tokens[close + 2:close + 2 + N_CELLS]
    return TraceSegments(think_a, as_grid(vocab.decode_image(focus)), think_b, as_grid(vocab.decode_image(result)))


def serialize(segments: TraceSegments, vocab: UnifiedVocab | None = None) -> list[int]:
    vocab = vocab or default_vocab()
    return [
        THINK_OPEN, *segments.think_a,
        IMG_BEGIN, *vocab.encode_image(segments.focus_image.ravel()), IMG_END,
        *segments.think_b, THINK_CLOSE,
        IMG_BEGIN, *vocab.encode_image(segments.result_image.ravel()), IMG_END, EOS,
    ]


MUTATIONS = ("delete_structural", "substitute_structural", "truncate", "insert_image_token")


def structural_positions(tokens: Sequence[int]) -> list[int]:
    return [i for i, t in enumerate(tokens) if 0 <= t < len(STRUCTURAL)]


def mutate_for_test(tokens: Sequence[int], mutation_kind: str, position: int | None = None,
                    rng: np.random.Generator | None = None) -> list[int]:
    """Apply one grammar-breaking edit to a valid trace.

    ``position`` is an absolute token index (``insert_image_token`` inserts
    before it); when ``None`` a position is drawn from ``rng``.
    """
    vocab = default_vocab()
    rng = rng if rng is not None else np.random.default_rng(0)
    out = [int(t) for t in tokens]
    if mutation_kind in ("delete_structural", "substitute_structural"):
        if position is None:
            position = int(rng.choice(structural_positions(out)))
        if not 0 <= out[position] < len(STRUCTURAL):
            raise ValueError(f"token at {position} is not structural")
        if mutation_kind == "delete_structural":
            del out[position]
        else:
            out[position] = vocab.n_structural + int(rng.integers(vocab.n_words))
    elif mutation_kind == "truncate":
        if position is None:
            position = int(rng.integers(len(out)))
        out = out[:position]
    elif mutation_kind == "insert_image_token":
        if position is None:
            # somewhere inside the result block's payload
            end = len(out) - 2
            position = int(rng.integers(end - N_CELLS, end + 1))
        out.insert(position, vocab.color_token(int(rng.integers(8))))
    else:
        raise ValueError(f"unknown mutation: {mutation_kind!r}")
    return out
