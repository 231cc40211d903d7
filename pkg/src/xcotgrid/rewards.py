"""Exact format, subject-similarity and text-alignment rewards on grid images."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import trace_format
from .vocab import IMG_BEGIN, default_vocab
from .world import N_CELLS, ANCHORS, GLYPHS, GLYPH_SIZE, PLACEMENTS, PromptSpec, SceneSpec, as_grid, glyph_footprint

# manhattan distance (in cells) at which the position score reaches zero
POSITION_DECAY = 6.0


@dataclass(frozen=True)
class RewardWeights:
    w_f: float = 1.0
    w_i: float = 1.0
    w_t: float = 1.0
    gating: bool = True

    def __post_init__(self):
        if min(self.w_f, self.w_i, self.w_t) < 0:
            raise ValueError("reward weights must be non-negative")
        if max(self.w_f, self.w_i, self.w_t) <= 0:
            raise ValueError("at least one reward weight must be positive")


@dataclass(frozen=True)
class RewardBreakdown:
    r_f: float
    r_i: float
    r_t: float
    total: float
    best_match_anchor: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best_match_anchor"] = None if self.best_match_anchor is None else list(self.best_match_anchor)
        return d


def reward_format(trace_tokens: Sequence[int]) -> float:
    return 1.0 if trace_format.validate(trace_tokens).accepted else 0.0


def subject_match(result_image, reference_scene: SceneSpec) -> tuple[float, tuple[int, int] | None]:
    """Best glyph-placement match score and its top-left; ``None`` when nothing matches."""
    img = as_grid(result_image)
    mask = GLYPHS[reference_scene.glyph_id].astype(bool)
    hit = img == reference_scene.subject_color
    best, best_p = -1, None
    for r, c in PLACEMENTS:
        n = int(hit[r:r + GLYPH_SIZE, c:c + GLYPH_SIZE][mask].sum())
        if n > best:
            best, best_p = n, (r, c)
    if best == 0:
        return 0.0, None
    return best / int(mask.sum()), best_p


def reward_subject(result_image, reference_scene: SceneSpec) -> float:
    return subject_match(result_image, reference_scene)[0]


def reward_text(result_image, prompt: PromptSpec, reference_scene: SceneSpec) -> float:
    return _text_score(as_grid(result_image), prompt, reference_scene,
                       subject_match(result_image, reference_scene)[1])


def _text_score(img: np.ndarray, prompt: PromptSpec, scene: SceneSpec, best: tuple[int, int] | None) -> float:
    if best is None:
        pos_score = 0.0
        outside = np.ones(img.shape, dtype=bool)
    else:
        tr, tc = ANCHORS[prompt.target_anchor]
        dist = abs(best[0] - tr) + abs(best[1] - tc)
        pos_score = 1.0 if dist == 0 else max(0.0, 1.0 - dist / POSITION_DECAY)
        outside = ~glyph_footprint(scene.glyph_id, best)
    bg_score = float((img[outside] == prompt.target_background).mean())
    return (pos_score + bg_score) / 2


def score_image(result_image, reference_scene: SceneSpec, prompt: PromptSpec,
                weights: RewardWeights = RewardWeights(), r_f: float = 1.0) -> RewardBreakdown:
    img = as_grid(result_image)
    r_i, best = subject_match(img, reference_scene)
    r_t = _text_score(img, prompt, reference_scene, best)
    total = weights.w_f * r_f + weights.w_i * r_i + weights.w_t * r_t
    return RewardBreakdown(r_f, r_i, r_t, total, best)


def score_trace(trace_tokens: Sequence[int], reference_scene: SceneSpec, prompt: PromptSpec,
                weights: RewardWeights = RewardWeights()) -> RewardBreakdown:
    if trace_format.validate(trace_tokens).accepted:
        result = trace_format.parse(trace_tokens).result_image
        return score_image(result, reference_scene, prompt, weights, r_f=1.0)
    if not weights.gating:
        result = salvage_result_image(trace_tokens)
        if result is not None:
            return score_image(result, reference_scene, prompt, weights, r_f=0.0)
    return RewardBreakdown(0.0, 0.0, 0.0, 0.0, None)


def salvage_result_image(tokens: Sequence[int]) -> np.ndarray | None:
    """Last complete ``IMG_BEGIN color{64}`` run in a malformed trace, if any (ungated scoring only)."""
    vocab = default_vocab()
    tokens = [int(t) for t in tokens]
    for start in range(len(tokens) - N_CELLS - 1, -1, -1):
        if tokens[start] == IMG_BEGIN:
            block = tokens[start + 1:start + 1 + N_CELLS]
            if all(vocab.is_color(t) for t in block):
                return as_grid(vocab.decode_image(block))
    return None
