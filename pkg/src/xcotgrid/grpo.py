"""Group Relative Policy Optimization on top of the cold-start policy.

Per step: sample G traces for each of a few fresh inputs from the current
snapshot, score them, normalize rewards within each group, and take one
clipped-surrogate update with a k3 KL penalty toward the frozen reference.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .policy import DecoderPolicy, clone_policy, sample_contexts, save_checkpoint, token_logprobs
from .rewards import RewardBreakdown, RewardWeights, score_trace
from .sft import NonFiniteLoss
from .vocab import PAD, default_vocab
from .world import XCoTSample, synth_sample

log = logging.getLogger(__name__)

GRPO_INPUT_STREAM = 2  # seed namespace for inputs drawn during GRPO


@dataclass(frozen=True)
class GrpoConfig:
    steps: int = 500
    group_size: int = 8
    prompts_per_step: int = 4
    rollout_temperature: float = 1.0
    clip_epsilon: float = 0.2
    kl_beta: float = 0.01
    advantage_epsilon: float = 1e-6
    learning_rate: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.95)
    grad_clip: float = 1.0
    max_new_tokens: int = 160
    seed: int = 0
    rank_rewards: bool = False

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.steps < 0 or self.prompts_per_step < 1:
            raise ValueError("steps must be >= 0 and prompts_per_step >= 1")
        for name in ("rollout_temperature", "clip_epsilon", "advantage_epsilon", "learning_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be non-negative")


@dataclass
class GroupRollout:
    context: list[int]
    traces: list[list[int]]
    old_logprobs: list[np.ndarray]
    member_seeds: list[list[int]]
    sample: XCoTSample | None = None
    rewards: list[RewardBreakdown] = field(default_factory=list)
    advantages: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.traces)


def member_seed(seed: int, step: int, input_index: int, member_index: int) -> list[int]:
    return [int(seed), int(step), int(input_index), int(member_index)]


def pack_rollouts(rollouts: Sequence[GroupRollout]) -> tuple[torch.Tensor, torch.Tensor, list[tuple[int, int]]]:
    """Padded ``context + trace`` rows, a target mask over trace tokens, and (group, member) ids."""
    rows, spans, ids = [], [], []
    for g, ro in enumerate(rollouts):
        for m, trace in enumerate(ro.traces):
            rows.append(list(ro.context) + list(trace))
            spans.append((len(ro.context), len(trace)))
            ids.append((g, m))
    width = max(len(r) for r in rows)
    tokens = torch.full((len(rows), width), PAD, dtype=torch.long)
    mask = torch.zeros((len(rows), width - 1))
    for i, (row, (start, n)) in enumerate(zip(rows, spans)):
        tokens[i, :len(row)] = torch.as_tensor(row)
        mask[i, start - 1:start - 1 + n] = 1.0
    return tokens, mask, ids


def _old_logprob_matrix(rollouts: Sequence[GroupRollout], shape: tuple[int, int], mask: torch.Tensor,
                        dtype: torch.dtype) -> torch.Tensor:
    old = torch.zeros(shape, dtype=dtype)
    i = 0
    for ro in rollouts:
        for lp in ro.old_logprobs:
            old[i, mask[i].bool()] = torch.as_tensor(lp, dtype=dtype)
            i += 1
    return old


def sequence_logprobs(model: DecoderPolicy, rollouts: Sequence[GroupRollout]) -> list[list[np.ndarray]]:
    """Teacher-forced per-token log-probs of every trace, grouped like ``rollouts``."""
    tokens, mask, ids = pack_rollouts(rollouts)
    with torch.no_grad():
        lp = token_logprobs(model, tokens)
    out: list[list[np.ndarray]] = [[] for _ in rollouts]
    for i, (g, _) in enumerate(ids):
        out[g].append(lp[i][mask[i].bool()].double().numpy())
    return out


def sample_group(snapshot: DecoderPolicy, sample: XCoTSample, group_size: int, seed: int, step: int = 0,
                 input_index: int = 0, temperature: float = 1.0, max_new_tokens: int = 160) -> GroupRollout:
    """G rollouts from one conditioning context (no grammar masking); rewards left unfilled."""
    return sample_groups(snapshot, [sample], group_size, seed, step, temperature, max_new_tokens,
                         first_index=input_index)[0]


def sample_groups(snapshot: DecoderPolicy, samples: Sequence[XCoTSample], group_size: int, seed: int,
                  step: int = 0, temperature: float = 1.0, max_new_tokens: int = 160,
                  first_index: int = 0) -> list[GroupRollout]:
    contexts, seeds = [], []
    for j, s in enumerate(samples):
        for m in range(group_size):
            contexts.append(s.context())
            seeds.append(member_seed(seed, step, first_index + j, m))
    results = sample_contexts(snapshot, contexts, seeds, temperature, max_new_tokens, grammar_mask=False)
    rollouts = []
    for j, s in enumerate(samples):
        chunk = results[j * group_size:(j + 1) * group_size]
        rollouts.append(GroupRollout(
            context=s.context(),
            traces=[r.tokens for r in chunk],
            old_logprobs=[],
            member_seeds=seeds[j * group_size:(j + 1) * group_size],
            sample=s,
        ))
    for ro, lps in zip(rollouts, sequence_logprobs(snapshot, rollouts)):
        ro.old_logprobs = lps
    return rollouts


def compute_advantages(rewards: Sequence[float], eps: float = 1e-6) -> np.ndarray:
    """``(r - mean) / (population_std + eps)``; a zero-variance group maps to all zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two members")
    centered = r - r.mean()
    return centered / (np.sqrt(np.mean(centered ** 2)) + eps)


def score_group(rollout: GroupRollout, weights: RewardWeights, eps: float = 1e-6, rank: bool = False) -> None:
    s = rollout.sample
    rollout.rewards = [score_trace(t, s.reference_scene, s.prompt, weights) for t in rollout.traces]
    totals = [b.total for b in rollout.rewards]
    if rank:
        totals = rankdata(totals)  # ties share their average rank
    rollout.advantages = compute_advantages(totals, eps)


def k3_estimate(logp: torch.Tensor, ref_logp: torch.Tensor) -> torch.Tensor:
    """Per-token ``exp(d) - d - 1`` with ``d = ref - logp``; non-negative, zero iff equal."""
    d = ref_logp - logp
    return torch.exp(d) - d - 1


def grpo_objective(model: DecoderPolicy, rollouts: Sequence[GroupRollout], ref_model: DecoderPolicy,
                   config: GrpoConfig) -> tuple[torch.Tensor, dict]:
    """Clipped surrogate plus k3 KL, averaged per trace over tokens, then over traces and groups."""
    if any(ro.advantages is None for ro in rollouts):
        raise ValueError("rollouts must be scored before computing the objective")
    dtype = next(model.parameters()).dtype
    tokens, mask, ids = pack_rollouts(rollouts)
    mask = mask.to(dtype)
    logp = token_logprobs(model, tokens)
    with torch.no_grad():
        ref_logp = token_logprobs(ref_model, tokens).to(dtype)
    old_logp = _old_logprob_matrix(rollouts, tuple(logp.shape), mask, dtype)
    adv = torch.as_tensor([rollouts[g].advantages[m] for g, m in ids], dtype=dtype).unsqueeze(1)
    ratio = torch.exp((logp - old_logp) * mask)
    clipped = ratio.clamp(1 - config.clip_epsilon, 1 + config.clip_epsilon)
    surrogate = torch.minimum(ratio * adv, clipped * adv)
    k3 = k3_estimate(logp, ref_logp) * mask
    lengths = mask.sum(1).clamp(min=1)
    per_trace = -(surrogate * mask).sum(1) / lengths + config.kl_beta * (k3 * mask).sum(1) / lengths
    group_index = torch.as_tensor([g for g, _ in ids])
    group_sizes = torch.bincount(group_index).to(dtype)
    # mean over members within each group, then over groups
    loss = (per_trace / group_sizes[group_index]).sum() / len(rollouts)
    with torch.no_grad():
        n_tok = mask.sum()
        was_clipped = ((ratio - clipped).abs() > 0) & (mask > 0)
        stats = {
            "kl": float((k3 * mask).sum() / n_tok),
            "clip_fraction": float(was_clipped.sum() / n_tok),
            "max_ratio_dev": float(((ratio - 1).abs() * mask).max()),
        }
    return loss, stats


def grpo_loss(model: DecoderPolicy, rollouts, ref_model: DecoderPolicy, config: GrpoConfig) -> torch.Tensor:
    if isinstance(rollouts, GroupRollout):
        rollouts = [rollouts]
    return grpo_objective(model, rollouts, ref_model, config)[0]


def draw_inputs(seed: int, step: int, count: int) -> list[XCoTSample]:
    return [synth_sample([int(seed), GRPO_INPUT_STREAM, int(step), j], "train") for j in range(count)]


@dataclass
class GrpoResult:
    model: DecoderPolicy
    metrics: list[dict]


def train_grpo(sft_model: DecoderPolicy, config: GrpoConfig, weights: RewardWeights = RewardWeights(),
               out_dir: str | Path | None = None, dump_rollouts: bool = False,
               on_metrics: Callable[[dict], None] | None = None) -> GrpoResult:
    """Fine-tune a copy of ``sft_model``; the reference policy is a frozen copy of it too."""
    torch.manual_seed(config.seed)
    model = clone_policy(sft_model)
    ref = clone_policy(sft_model)
    ref.requires_grad_(False)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas)
    out = Path(out_dir) if out_dir is not None else None
    metrics: list[dict] = []
    metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8") if out is not None else None
    dump_fh = open(out / "rollouts.jsonl", "w", encoding="utf-8") if out is not None and dump_rollouts else None
    vocab = default_vocab()
    try:
        for step in range(1, config.steps + 1):
            inputs = draw_inputs(config.seed, step, config.prompts_per_step)
            model.eval()
            rollouts = sample_groups(model, inputs, config.group_size, config.seed, step,
                                     config.rollout_temperature, config.max_new_tokens)
            for ro in rollouts:
                score_group(ro, weights, config.advantage_epsilon, config.rank_rewards)
            loss, stats = grpo_objective(model, rollouts, ref, config)
            if not torch.isfinite(loss):
                log.error("non-finite GRPO loss at step %d: %s", step, stats)
                if out is not None:
                    save_checkpoint(out / "abort_state.xcf", model, {"stage": "grpo", "step": step, **stats})
                raise NonFiniteLoss(f"non-finite GRPO loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip))
            opt.step()
            br = [b for ro in rollouts for b in ro.rewards]
            row = {
                "step": step,
                "mean_total": float(np.mean([b.total for b in br])),
                "mean_r_f": float(np.mean([b.r_f for b in br])),
                "mean_r_i": float(np.mean([b.r_i for b in br])),
                "mean_r_t": float(np.mean([b.r_t for b in br])),
                "kl": stats["kl"],
                "clip_fraction": stats["clip_fraction"],
                "grad_norm": grad_norm,
            }
            metrics.append(row)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
            if dump_fh is not None:
                for j, ro in enumerate(rollouts):
                    for m, (trace, b) in enumerate(zip(ro.traces, ro.rewards)):
                        dump_fh.write(json.dumps({
                            "step": step, "input": j, "member": m, "trace": vocab.decode(trace),
                            "reward": b.to_dict(), "advantage": float(ro.advantages[m]),
                        }, sort_keys=True) + "\n")
            if on_metrics is not None:
                on_metrics(row)
    finally:
        for fh in (metrics_fh, dump_fh):
            if fh is not None:
                fh.close()
    if out is not None:
        save_checkpoint(out / "final.xcf", model, {"stage": "grpo", "steps": config.steps, "seed": config.seed})
    return GrpoResult(model, metrics)
