"""Zero-shot benchmark on held-out subjects and the ablation comparison table."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from . import rewards, trace_format
from .policy import DecoderPolicy, sample_contexts
from .vocab import EOS, IMG_BEGIN, IMG_END, default_vocab
from .world import (
    ANCHORS,
    BACKGROUND_COLORS,
    EVAL_COMBOS,
    N_CELLS,
    PromptSpec,
    SceneSpec,
    XCoTSample,
    as_grid,
    make_sample,
)

METRICS = ("subject_fidelity", "image_similarity", "text_alignment", "format_valid", "total")


class ZeroShotViolation(RuntimeError):
    pass


# -- metrics ------------------------------------------------------------------

metric_subject_fidelity = rewards.reward_subject
metric_text_alignment = rewards.reward_text


def metric_image_similarity(generated, reference_image) -> float:
    a, b = as_grid(generated), as_grid(reference_image)
    return 1.0 - int((a != b).sum()) / N_CELLS


# -- bench --------------------------------------------------------------------

@dataclass
class GridBench:
    cases: list[XCoTSample]
    seed: int

    @property
    def combos(self) -> set[tuple[int, int]]:
        return {c.reference_scene.combo for c in self.cases}

    def to_jsonl(self) -> str:
        from .world import record_line

        return "".join(record_line(c) + "\n" for c in self.cases)

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()


def build_bench(seed: int = 0, prompts_per_combo: int = 10, combos: Sequence[tuple[int, int]] = EVAL_COMBOS) -> GridBench:
    """Held-out combos x prompts; each combo's prompts cover every anchor and background."""
    cases = []
    for k, (glyph, color) in enumerate(combos):
        rng = np.random.default_rng([int(seed), k])
        anchors = list(rng.permutation(len(ANCHORS)))
        backgrounds = list(rng.permutation(len(BACKGROUND_COLORS)))
        while len(anchors) < prompts_per_combo:
            anchors.append(int(rng.integers(len(ANCHORS))))
        while len(backgrounds) < prompts_per_combo:
            backgrounds.extend(rng.permutation(len(BACKGROUND_COLORS)))
        for j in range(prompts_per_combo):
            prompt = PromptSpec(int(anchors[j]), int(BACKGROUND_COLORS[backgrounds[j]]))
            while True:
                scene = SceneSpec(glyph, color, int(rng.integers(4)), int(rng.integers(len(ANCHORS))))
                if scene.anchor != prompt.target_anchor or scene.background_color != prompt.target_background:
                    break
            cases.append(make_sample(scene, prompt, split="eval"))
    return GridBench(cases, seed)


def check_zero_shot(bench: GridBench, train_combos: Iterable[Sequence[int]]) -> None:
    leaked = bench.combos & {tuple(int(x) for x in c) for c in train_combos}
    if leaked:
        raise ZeroShotViolation(f"bench subjects present in training data: {sorted(leaked)}")


# -- policies -----------------------------------------------------------------

class TracePolicy(Protocol):
    trace_kind: str

    def generate(self, contexts: Sequence[list[int]], seeds: Sequence, temperature: float,
                 grammar_mask: bool) -> list[list[int]]: ...


@dataclass
class ModelPolicy:
    model: DecoderPolicy
    trace_kind: str = "xcot"
    max_new_tokens: int = 160
    batch_size: int = 80

    def generate(self, contexts, seeds, temperature, grammar_mask):
        out = []
        for i in range(0, len(contexts), self.batch_size):
            res = sample_contexts(self.model, contexts[i:i + self.batch_size], seeds[i:i + self.batch_size],
                                  temperature, self.max_new_tokens,
                                  grammar_mask and self.trace_kind == "xcot")
            out.extend(r.tokens for r in res)
        return out


@dataclass
class OraclePolicy:
    """Replays ground-truth engine traces for known contexts."""

    samples: Sequence[XCoTSample]
    trace_kind: str = "xcot"
    _table: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        for s in self.samples:
            self._table[tuple(s.context())] = s.trace() if self.trace_kind == "xcot" else s.direct_trace()

    def generate(self, contexts, seeds, temperature, grammar_mask):
        return [list(self._table[tuple(c)]) for c in contexts]


def extract_result(trace: Sequence[int], kind: str = "xcot") -> np.ndarray | None:
    """Result image of a well-formed trace, or ``None``."""
    if kind == "xcot":
        if not trace_format.validate(trace).accepted:
            return None
        return trace_format.parse(trace).result_image
    vocab = default_vocab()
    t = list(trace)
    if (len(t) == N_CELLS + 3 and t[0] == IMG_BEGIN and t[-2] == IMG_END and t[-1] == EOS
            and all(vocab.is_color(x) for x in t[1:-2])):
        return as_grid(vocab.decode_image(t[1:-2]))
    return None


# -- benchmark ----------------------------------------------------------------

@dataclass
class EvalReport:
    cases: list[dict]
    means: dict
    metadata: dict

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "means": self.means, "cases": self.cases}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def score_generation(trace: Sequence[int], case: XCoTSample, kind: str = "xcot",
                     weights: rewards.RewardWeights = rewards.RewardWeights()) -> dict:
    img = extract_result(trace, kind)
    if img is None:
        return {m: 0.0 for m in METRICS}
    b = rewards.score_image(img, case.reference_scene, case.prompt, weights, r_f=1.0)
    return {
        "subject_fidelity": b.r_i,
        "image_similarity": metric_image_similarity(img, case.reference_image),
        "text_alignment": b.r_t,
        "format_valid": 1.0,
        "total": b.total,
    }


def run_benchmark(policy: TracePolicy, bench: GridBench, temperature: float = 0.8, n_samples_per_case: int = 4,
                  seed: int = 0, grammar_mask: bool = False, train_combos: Iterable | None = None,
                  weights: rewards.RewardWeights = rewards.RewardWeights(), metadata: dict | None = None) -> EvalReport:
    """Sample ``n_samples_per_case`` traces per case, score each, and average."""
    if train_combos is not None:
        check_zero_shot(bench, train_combos)
    contexts, seeds = [], []
    for ci, case in enumerate(bench.cases):
        for k in range(n_samples_per_case):
            contexts.append(case.context())
            seeds.append([int(seed), ci, k])
    traces = policy.generate(contexts, seeds, temperature, grammar_mask)
    per_case = []
    for ci, case in enumerate(bench.cases):
        scores = [score_generation(traces[ci * n_samples_per_case + k], case, policy.trace_kind, weights)
                  for k in range(n_samples_per_case)]
        row = {m: float(np.mean([s[m] for s in scores])) for m in METRICS}
        row["case"] = ci
        row["combo"] = list(case.reference_scene.combo)
        per_case.append(row)
    means = {m: float(np.mean([c[m] for c in per_case])) for m in METRICS}
    meta = {
        "bench_seed": bench.seed,
        "bench_sha256": bench.digest(),
        "temperature": temperature,
        "n_samples_per_case": n_samples_per_case,
        "seed": seed,
        "grammar_mask": grammar_mask,
        "trace_kind": policy.trace_kind,
        **(metadata or {}),
    }
    return EvalReport(per_case, means, meta)


# -- ablation -----------------------------------------------------------------

@dataclass(frozen=True)
class VerdictRule:
    better: str
    worse: str
    metric: str
    mode: str = "majority"  # "majority": >= 2/3 of paired seeds; "median": compare medians
    min_rel_gain: float = 0.0  # when set, a win needs better >= worse * (1 + gain); otherwise strictly greater

    @property
    def name(self) -> str:
        gain = f" by >={self.min_rel_gain:.0%}" if self.min_rel_gain else ""
        return f"{self.better} > {self.worse} on {self.metric}{gain} ({self.mode})"


DEFAULT_RULES = (
    VerdictRule("grpo_full", "sft_xcot", "total", "majority", 0.05),
    VerdictRule("grpo_fi", "grpo_f", "subject_fidelity", "median"),
    VerdictRule("grpo_ft", "grpo_f", "text_alignment", "median"),
    VerdictRule("sft_xcot", "base_no_cot", "subject_fidelity", "majority"),
)


@dataclass
class Verdict:
    rule: str
    passed: bool
    detail: str

    def to_dict(self) -> dict:
        return {"rule": self.rule, "passed": self.passed, "detail": self.detail}


def judge(rule: VerdictRule, better: Sequence[float], worse: Sequence[float]) -> Verdict:
    if rule.mode == "median":
        a, b = float(np.median(better)), float(np.median(worse))
        return Verdict(rule.name, a > b, f"median {a:.4f} vs {b:.4f}")
    if len(better) != len(worse):
        raise ValueError("majority verdicts need paired seeds")
    if rule.min_rel_gain:
        wins = sum(a >= b * (1 + rule.min_rel_gain) for a, b in zip(better, worse))
    else:
        wins = sum(a > b for a, b in zip(better, worse))
    n = len(better)
    return Verdict(rule.name, 3 * wins >= 2 * n,
                   f"{wins}/{n} seeds; " + ", ".join(f"{a:.4f} vs {b:.4f}" for a, b in zip(better, worse)))


@dataclass
class AblationTable:
    rows: list[dict]
    verdicts: list[Verdict]

    def to_dict(self) -> dict:
        return {"rows": self.rows, "verdicts": [v.to_dict() for v in self.verdicts]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        header = ["variant", "seeds", *METRICS]
        body = [[r["variant"], str(r["seeds"]), *(f"{r[m]:.4f}" for m in METRICS)] for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(header, *body)]
        lines = ["  ".join(x.ljust(w) for x, w in zip(line, widths)) for line in [header, *body]]
        lines += [f"[{'PASS' if v.passed else 'FAIL'}] {v.rule}: {v.detail}" for v in self.verdicts]
        return "\n".join(lines) + "\n"


def ablation_from_reports(reports: Mapping[str, Sequence[EvalReport]],
                          rules: Sequence[VerdictRule] = DEFAULT_RULES) -> AblationTable:
    """Rows hold per-metric medians over seeds, sorted by subject fidelity (descending)."""
    rows = []
    for name, reps in reports.items():
        row = {"variant": name, "seeds": len(reps)}
        for m in METRICS:
            row[m] = float(np.median([r.means[m] for r in reps]))
        rows.append(row)
    rows.sort(key=lambda r: (-r["subject_fidelity"], r["variant"]))
    verdicts = []
    for rule in rules:
        if rule.better in reports and rule.worse in reports:
            verdicts.append(judge(rule, [r.means[rule.metric] for r in reports[rule.better]],
                                  [r.means[rule.metric] for r in reports[rule.worse]]))
    return AblationTable(rows, verdicts)


def run_ablation_matrix(policies: Mapping[str, TracePolicy | Sequence[TracePolicy]], bench: GridBench,
                        rules: Sequence[VerdictRule] = DEFAULT_RULES, **bench_kwargs) -> AblationTable:
    """Evaluate every variant (one policy per seed) on the same bench and compare."""
    reports = {}
    for name, pols in policies.items():
        pols = [pols] if not isinstance(pols, (list, tuple)) else pols
        reports[name] = [run_benchmark(p, bench, **bench_kwargs) for p in pols]
    return ablation_from_reports(reports, rules)
