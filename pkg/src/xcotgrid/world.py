"""Synthetic grid world: glyph subjects, renderer, thinking templates and the data engine."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .vocab import (
    BACKGROUND_NAMES,
    BOS,
    COLOR_NAMES,
    EOS,
    GEN,
    IMG_BEGIN,
    IMG_END,
    POSITION_NAMES,
    SEP,
    SUBJECT_NAMES,
    THINK_CLOSE,
    THINK_OPEN,
    UnifiedVocab,
    default_vocab,
)

GRID = 8
N_CELLS = GRID * GRID
GLYPH_SIZE = 3
NEUTRAL = 0
SUBJECT_COLORS = (4, 5, 6, 7)
BACKGROUND_COLORS = (0, 1, 2, 3)

# Frozen output of a seeded rejection sampler (>= 5 cells, pairwise distinct).
_GLYPH_ROWS = (
    "011/111/111", "111/000/101", "111/100/110", "110/101/101",
    "101/011/001", "101/111/111", "100/111/001", "111/101/011",
    "100/011/111", "101/110/101", "101/111/001", "001/111/111",
    "011/001/111", "101/110/111", "101/101/111", "111/101/100",
)
GLYPHS = np.array(
    [[[int(ch) for ch in row] for row in spec.split("/")] for spec in _GLYPH_ROWS],
    dtype=np.uint8,
)
GLYPHS.setflags(write=False)
N_GLYPHS = len(GLYPHS)

# anchor index -> top-left (row, col); named by POSITION_NAMES
ANCHORS = tuple((r, c) for r in (0, 2, 5) for c in (0, 2, 5))
CENTER = POSITION_NAMES.index("center")
# every top-left placement a 3x3 glyph can take, row-major
PLACEMENTS = tuple((r, c) for r in range(GRID - GLYPH_SIZE + 1) for c in range(GRID - GLYPH_SIZE + 1))

# (glyph, subject_color) combos held out for zero-shot evaluation
EVAL_COMBOS = tuple((g, SUBJECT_COLORS[i % 4]) for i, g in enumerate(range(0, N_GLYPHS, 2)))
TRAIN_COMBOS = tuple(
    (g, c) for g in range(N_GLYPHS) for c in SUBJECT_COLORS if (g, c) not in EVAL_COMBOS
)

# RGB for PPM export
PALETTE_RGB = (
    (245, 245, 245), (70, 110, 220), (70, 170, 80), (128, 128, 128),
    (220, 40, 40), (240, 140, 20), (140, 60, 180), (240, 210, 30),
)

PROMPT_LEN = 6
THINK_A_LEN = 7
THINK_B_LEN = 8
CONTEXT_LEN = 1 + PROMPT_LEN + 1 + 1 + N_CELLS + 1 + 1
TRACE_LEN = 1 + THINK_A_LEN + 2 + N_CELLS + THINK_B_LEN + 1 + 2 + N_CELLS + 1


def glyph_popcount(glyph_id: int) -> int:
    return int(GLYPHS[glyph_id].sum())


@dataclass(frozen=True)
class SceneSpec:
    glyph_id: int
    subject_color: int
    background_color: int
    anchor: int

    def __post_init__(self):
        if not 0 <= self.glyph_id < N_GLYPHS:
            raise ValueError(f"glyph_id out of range: {self.glyph_id}")
        if self.subject_color not in SUBJECT_COLORS:
            raise ValueError(f"subject_color must be in {SUBJECT_COLORS}: {self.subject_color}")
        if self.background_color not in BACKGROUND_COLORS:
            raise ValueError(f"background_color must be in {BACKGROUND_COLORS}")
        if not 0 <= self.anchor < len(ANCHORS):
            raise ValueError(f"anchor out of range: {self.anchor}")

    @property
    def combo(self) -> tuple[int, int]:
        return (self.glyph_id, self.subject_color)

    def to_dict(self) -> dict:
        return {
            "glyph_id": self.glyph_id,
            "subject_color": self.subject_color,
            "background_color": self.background_color,
            "anchor": self.anchor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(int(d["glyph_id"]), int(d["subject_color"]), int(d["background_color"]), int(d["anchor"]))


@dataclass(frozen=True)
class PromptSpec:
    target_anchor: int
    target_background: int

    def __post_init__(self):
        if not 0 <= self.target_anchor < len(ANCHORS):
            raise ValueError(f"target_anchor out of range: {self.target_anchor}")
        if self.target_background not in BACKGROUND_COLORS:
            raise ValueError(f"target_background must be in {BACKGROUND_COLORS}")

    def to_dict(self) -> dict:
        return {"anchor": self.target_anchor, "background": self.target_background}

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSpec":
        return cls(int(d["anchor"]), int(d["background"]))


def as_grid(cells) -> np.ndarray:
    """Coerce 64 palette indices (flat or 8x8) into a validated 8x8 uint8 array."""
    arr = np.asarray(cells)
    if arr.size != N_CELLS:
        raise ValueError(f"image must have {N_CELLS} cells, got {arr.size}")
    arr = arr.reshape(GRID, GRID)
    if arr.min() < 0 or arr.max() >= len(PALETTE_RGB):
        raise ValueError("image cells must be palette indices in [0, 8)")
    return arr.astype(np.uint8)


def glyph_footprint(glyph_id: int, top_left: tuple[int, int]) -> np.ndarray:
    """Boolean 8x8 mask of the glyph's set cells placed at ``top_left``."""
    mask = np.zeros((GRID, GRID), dtype=bool)
    r, c = top_left
    mask[r:r + GLYPH_SIZE, c:c + GLYPH_SIZE] = GLYPHS[glyph_id].astype(bool)
    return mask


def render(scene: SceneSpec) -> np.ndarray:
    img = np.full((GRID, GRID), scene.background_color, dtype=np.uint8)
    img[glyph_footprint(scene.glyph_id, ANCHORS[scene.anchor])] = scene.subject_color
    return img


def make_focus(glyph_id: int, subject_color: int) -> np.ndarray:
    return render(SceneSpec(glyph_id, subject_color, NEUTRAL, CENTER))


def target_scene(reference: SceneSpec, prompt: PromptSpec) -> SceneSpec:
    return SceneSpec(reference.glyph_id, reference.subject_color, prompt.target_background, prompt.target_anchor)


# -- templates ----------------------------------------------------------------

def prompt_words(prompt: PromptSpec) -> list[str]:
    return ["the", "subject", "at", POSITION_NAMES[prompt.target_anchor],
            "on", BACKGROUND_NAMES[prompt.target_background]]


def encode_prompt(prompt: PromptSpec, vocab: UnifiedVocab | None = None) -> list[int]:
    vocab = vocab or default_vocab()
    return vocab.encode_text(prompt_words(prompt))


def parse_prompt(tokens: Sequence[int], vocab: UnifiedVocab | None = None) -> PromptSpec:
    vocab = vocab or default_vocab()
    words = vocab.decode_words(tokens)
    if len(words) != PROMPT_LEN or words[:3] != ["the", "subject", "at"] or words[4] != "on":
        raise ValueError(f"not a prompt: {' '.join(words)}")
    return PromptSpec(POSITION_NAMES.index(words[3]), BACKGROUND_NAMES.index(words[5]))


def verbalize_understanding(scene: SceneSpec, vocab: UnifiedVocab | None = None) -> list[int]:
    vocab = vocab or default_vocab()
    return vocab.encode_text([
        COLOR_NAMES[scene.subject_color], SUBJECT_NAMES[scene.glyph_id], "at",
        POSITION_NAMES[scene.anchor], "on", COLOR_NAMES[scene.background_color], "background",
    ])


def parse_understanding(tokens: Sequence[int], vocab: UnifiedVocab | None = None) -> SceneSpec:
    vocab = vocab or default_vocab()
    w = vocab.decode_words(tokens)
    if len(w) != THINK_A_LEN or w[2] != "at" or w[4] != "on" or w[6] != "background":
        raise ValueError(f"not an understanding statement: {' '.join(w)}")
    return SceneSpec(SUBJECT_NAMES.index(w[1]), COLOR_NAMES.index(w[0]),
                     COLOR_NAMES.index(w[5]), POSITION_NAMES.index(w[3]))


def verbalize_plan(prompt: PromptSpec, scene: SceneSpec, vocab: UnifiedVocab | None = None) -> list[int]:
    vocab = vocab or default_vocab()
    return vocab.encode_text([
        "place", COLOR_NAMES[scene.subject_color], SUBJECT_NAMES[scene.glyph_id], "at",
        POSITION_NAMES[prompt.target_anchor], "on", COLOR_NAMES[prompt.target_background], "background",
    ])


def parse_plan(tokens: Sequence[int], vocab: UnifiedVocab | None = None) -> tuple[PromptSpec, int, int]:
    """Return ``(prompt, glyph_id, subject_color)`` named by a plan statement."""
    vocab = vocab or default_vocab()
    w = vocab.decode_words(tokens)
    if len(w) != THINK_B_LEN or w[0] != "place" or w[3] != "at" or w[5] != "on" or w[7] != "background":
        raise ValueError(f"not a plan statement: {' '.join(w)}")
    prompt = PromptSpec(POSITION_NAMES.index(w[4]), COLOR_NAMES.index(w[6]))
    return prompt, SUBJECT_NAMES.index(w[2]), COLOR_NAMES.index(w[1])


# -- samples ------------------------------------------------------------------

def build_context(prompt_tokens: Sequence[int], reference_image, vocab: UnifiedVocab | None = None) -> list[int]:
    """Conditioning frame: ``BOS prompt SEP IMG_BEGIN ref IMG_END GEN``."""
    vocab = vocab or default_vocab()
    ref = vocab.encode_image(as_grid(reference_image).ravel())
    return [BOS, *prompt_tokens, SEP, IMG_BEGIN, *ref, IMG_END, GEN]


@dataclass
class XCoTSample:
    prompt_tokens: list[int]
    prompt: PromptSpec
    reference_image: np.ndarray
    reference_scene: SceneSpec
    think_a: list[int]
    focus_image: np.ndarray
    think_b: list[int]
    result_image: np.ndarray
    split: str = "train"

    def context(self) -> list[int]:
        return build_context(self.prompt_tokens, self.reference_image)

    def trace(self) -> list[int]:
        vocab = default_vocab()
        return [
            THINK_OPEN, *self.think_a,
            IMG_BEGIN, *vocab.encode_image(self.focus_image.ravel()), IMG_END,
            *self.think_b, THINK_CLOSE,
            IMG_BEGIN, *vocab.encode_image(self.result_image.ravel()), IMG_END, EOS,
        ]

    def direct_trace(self) -> list[int]:
        """Trace with the thinking block removed (no-reasoning baseline target)."""
        vocab = default_vocab()
        return [IMG_BEGIN, *vocab.encode_image(self.result_image.ravel()), IMG_END, EOS]

    def to_record(self) -> dict:
        vocab = default_vocab()
        return {
            "prompt": list(self.prompt_tokens),
            "ref_image": vocab.encode_image(self.reference_image.ravel()),
            "scene": self.reference_scene.to_dict(),
            "target": self.prompt.to_dict(),
            "think_a": list(self.think_a),
            "focus": vocab.encode_image(self.focus_image.ravel()),
            "think_b": list(self.think_b),
            "result": vocab.encode_image(self.result_image.ravel()),
            "split": self.split,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "XCoTSample":
        vocab = default_vocab()
        prompt_tokens = [int(t) for t in rec["prompt"]]
        prompt = PromptSpec.from_dict(rec["target"]) if "target" in rec else parse_prompt(prompt_tokens)
        return cls(
            prompt_tokens=prompt_tokens,
            prompt=prompt,
            reference_image=as_grid(vocab.decode_image(rec["ref_image"])),
            reference_scene=SceneSpec.from_dict(rec["scene"]),
            think_a=[int(t) for t in rec["think_a"]],
            focus_image=as_grid(vocab.decode_image(rec["focus"])),
            think_b=[int(t) for t in rec["think_b"]],
            result_image=as_grid(vocab.decode_image(rec["result"])),
            split=rec.get("split", "train"),
        )


def make_sample(scene: SceneSpec, prompt: PromptSpec, split: str = "train") -> XCoTSample:
    """Ground-truth sample for an explicit (reference scene, prompt) pair."""
    return XCoTSample(
        prompt_tokens=encode_prompt(prompt),
        prompt=prompt,
        reference_image=render(scene),
        reference_scene=scene,
        think_a=verbalize_understanding(scene),
        focus_image=make_focus(scene.glyph_id, scene.subject_color),
        think_b=verbalize_plan(prompt, scene),
        result_image=render(target_scene(scene, prompt)),
        split=split,
    )


_SPLIT_CODE = {"train": 0, "eval": 1}


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def synth_sample(rng_seed, split: str = "train") -> XCoTSample:
    """Draw one sample from the split's combo pool; the prompt always asks for a real edit."""
    if split not in _SPLIT_CODE:
        raise ValueError(f"unknown split: {split!r}")
    rng = _rng(rng_seed)
    pool = TRAIN_COMBOS if split == "train" else EVAL_COMBOS
    glyph_id, color = pool[int(rng.integers(len(pool)))]
    scene = SceneSpec(glyph_id, color, int(rng.integers(4)), int(rng.integers(len(ANCHORS))))
    while True:
        prompt = PromptSpec(int(rng.integers(len(ANCHORS))), int(rng.integers(4)))
        if prompt.target_anchor != scene.anchor or prompt.target_background != scene.background_color:
            break
    return make_sample(scene, prompt, split)


def record_seed(seed: int, split: str, index: int) -> list[int]:
    return [int(seed), _SPLIT_CODE[split], int(index)]


def generate_split(seed: int, split: str, n: int) -> list[XCoTSample]:
    return [synth_sample(record_seed(seed, split, i), split) for i in range(n)]


# -- files --------------------------------------------------------------------

def record_line(sample: XCoTSample) -> str:
    return json.dumps(sample.to_record(), sort_keys=True, separators=(",", ":"))


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_jsonl(path: str | os.PathLike, samples: Sequence[XCoTSample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(record_line(s) + "\n")


def read_jsonl(path: str | os.PathLike) -> list[XCoTSample]:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            return [XCoTSample.from_record(json.loads(line)) for line in fh if line.strip()]
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc


@dataclass
class DatasetConfig:
    n_train: int = 20000
    n_eval: int = 500
    seed: int = 1
    out_dir: str = "data"


def build_dataset(config: DatasetConfig) -> dict:
    """Write ``train.jsonl``, ``eval.jsonl`` and ``manifest.json``; return the manifest."""
    out = Path(config.out_dir)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory does not exist: {out.parent}")
    out.mkdir(exist_ok=True)
    manifest = {"seed": config.seed, "vocab_hash": default_vocab().hash(), "splits": {}}
    for split, n, combos in (("train", config.n_train, TRAIN_COMBOS), ("eval", config.n_eval, EVAL_COMBOS)):
        path = out / f"{split}.jsonl"
        try:
            write_jsonl(path, generate_split(config.seed, split, n))
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        manifest["splits"][split] = {
            "n": n,
            "file": path.name,
            "sha256": sha256_file(path),
            "combos": [list(c) for c in combos],
        }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def write_ppm(path: str | os.PathLike, images: Sequence[np.ndarray], scale: int = 8) -> None:
    """Binary P6 export; several images are laid side by side with a 1-cell gap."""
    tiles = [as_grid(im) for im in images]
    gap = np.full((GRID, 1), -1, dtype=int)
    strip = np.concatenate(sum(([t.astype(int), gap] for t in tiles), [])[:-1], axis=1)
    rgb = np.zeros(strip.shape + (3,), dtype=np.uint8)
    for idx, color in enumerate(PALETTE_RGB):
        rgb[strip == idx] = color
    rgb[strip < 0] = (0, 0, 0)
    rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
