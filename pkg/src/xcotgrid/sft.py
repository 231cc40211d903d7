"""Cold-start supervised fine-tuning on ground-truth reasoning traces."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .policy import DecoderPolicy, PolicyConfig, clone_policy, init_params, save_checkpoint, token_logprobs
from .vocab import PAD
from .world import XCoTSample

log = logging.getLogger(__name__)


class EmptyMask(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class SftConfig:
    steps: int = 16000
    batch_size: int = 16
    learning_rate: float = 3e-4
    warmup_steps: int = 200
    min_lr_ratio: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50
    eval_every: int = 500
    heldout_size: int = 256
    trace: str = "xcot"  # or "direct" for the no-reasoning baseline

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.steps and self.steps <= self.warmup_steps:
            raise ValueError("steps must exceed warmup_steps")
        if self.trace not in ("xcot", "direct"):
            raise ValueError(f"unknown trace kind {self.trace!r}")


def sample_trace(sample: XCoTSample, kind: str = "xcot") -> list[int]:
    return sample.trace() if kind == "xcot" else sample.direct_trace()


def pack_batch(samples: Sequence[XCoTSample], kind: str = "xcot") -> tuple[torch.Tensor, torch.Tensor]:
    """Token matrix and loss mask; mask is 1 exactly on trace tokens (after GEN)."""
    rows, masks = [], []
    for s in samples:
        ctx, trace = s.context(), sample_trace(s, kind)
        rows.append(ctx + trace)
        masks.append([0] * len(ctx) + [1] * len(trace))
    width = max(len(r) for r in rows)
    tokens = torch.full((len(rows), width), PAD, dtype=torch.long)
    mask = torch.zeros((len(rows), width))
    for i, (r, m) in enumerate(zip(rows, masks)):
        tokens[i, :len(r)] = torch.as_tensor(r)
        mask[i, :len(m)] = torch.as_tensor(m, dtype=mask.dtype)
    return tokens, mask


def sft_loss(model: DecoderPolicy, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy over positions whose target has mask 1."""
    target_mask = mask[:, 1:].to(next(model.parameters()).dtype)
    n = target_mask.sum()
    if n == 0:
        raise EmptyMask("batch has no supervised positions")
    return -(token_logprobs(model, tokens) * target_mask).sum() / n


def lr_at(step: int, cfg: SftConfig) -> float:
    """Linear warmup, then cosine decay to ``min_lr_ratio * learning_rate``."""
    if step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    floor = cfg.min_lr_ratio * cfg.learning_rate
    return floor + 0.5 * (cfg.learning_rate - floor) * (1 + math.cos(math.pi * progress))


def heldout_loss(model: DecoderPolicy, samples: Sequence[XCoTSample], kind: str, batch_size: int = 64) -> float:
    total, count = 0.0, 0.0
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            tokens, mask = pack_batch(samples[i:i + batch_size], kind)
            n = float(mask[:, 1:].sum())
            total += float(sft_loss(model, tokens, mask)) * n
            count += n
    return total / count


@dataclass
class SftResult:
    model: DecoderPolicy
    best_model: DecoderPolicy
    metrics: list[dict]
    best_heldout: float | None


def train_sft(config: SftConfig, dataset: Sequence[XCoTSample], policy_config: PolicyConfig,
              heldout: Sequence[XCoTSample] | None = None, out_dir: str | Path | None = None,
              init_seed: int | None = None, on_metrics: Callable[[dict], None] | None = None) -> SftResult:
    """Teacher-forced training with Adam, gradient clipping and warmup-cosine schedule.

    Writes ``final.xcf``, ``best.xcf`` and ``metrics.jsonl`` when ``out_dir`` is given.
    """
    if not dataset:
        raise EmptyDataset("SFT dataset is empty")
    longest = len(dataset[0].context()) + len(sample_trace(dataset[0], config.trace))
    if longest > policy_config.context_len:
        raise ValueError(f"records of length {longest} exceed context_len {policy_config.context_len}")
    torch.manual_seed(config.seed)
    model = init_params(policy_config, config.seed if init_seed is None else init_seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas, eps=config.eps)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(dataset))
    cursor = 0
    heldout = list(heldout[:config.heldout_size]) if heldout else []
    metrics: list[dict] = []
    best_model, best_loss = clone_policy(model), None
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8") if out is not None else None

    def emit(row: dict) -> None:
        metrics.append(row)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
        if on_metrics is not None:
            on_metrics(row)

    try:
        for step in range(1, config.steps + 1):
            idx = []
            while len(idx) < config.batch_size:
                if cursor == len(order):
                    order, cursor = rng.permutation(len(dataset)), 0
                take = order[cursor:cursor + config.batch_size - len(idx)]
                idx.extend(int(i) for i in take)
                cursor += len(take)
            tokens, mask = pack_batch([dataset[i] for i in idx], config.trace)
            lr = lr_at(step - 1, config)
            for group in opt.param_groups:
                group["lr"] = lr
            loss = sft_loss(model, tokens, mask)
            if not torch.isfinite(loss):
                log.error("non-finite SFT loss at step %d", step)
                raise NonFiniteLoss(f"non-finite loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip))
            opt.step()
            row = None
            if step % config.log_every == 0 or step == config.steps:
                row = {"step": step, "loss": float(loss.detach()), "lr": lr, "grad_norm": grad_norm}
            if heldout and (step % config.eval_every == 0 or step == config.steps):
                h = heldout_loss(model, heldout, config.trace)
                row = row or {"step": step, "loss": float(loss.detach()), "lr": lr, "grad_norm": grad_norm}
                row["heldout_loss"] = h
                if best_loss is None or h < best_loss:
                    best_loss, best_model = h, clone_policy(model)
            if row is not None:
                emit(row)
        if not heldout:
            best_model = clone_policy(model)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out is not None:
        extra = {"stage": "sft", "trace": config.trace, "steps": config.steps, "seed": config.seed}
        save_checkpoint(out / "final.xcf", model, extra)
        save_checkpoint(out / "best.xcf", best_model, {**extra, "heldout_loss": best_loss})
    return SftResult(model, best_model, metrics, best_loss)


def build_no_cot_baseline(config: SftConfig, dataset: Sequence[XCoTSample], policy_config: PolicyConfig,
                          **kwargs) -> SftResult:
    """Same budget and data as :func:`train_sft`, but targets skip the thinking block."""
    return train_sft(replace(config, trace="direct"), dataset, policy_config, **kwargs)
