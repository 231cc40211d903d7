"""scikit-learn style facade over the cold-start + GRPO pipeline.

``X`` is a sequence of :class:`~xcotgrid.world.XCoTSample` (or dataset records);
``predict`` returns one 8x8 result image per input, or ``None`` for a malformed
trace. ``y`` is unused: targets live inside the samples.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .evaluate import extract_result, score_generation
from .grpo import GrpoConfig, train_grpo
from .policy import PolicyConfig, sample_contexts
from .rewards import RewardWeights
from .sft import SftConfig, train_sft
from .world import XCoTSample


def _as_samples(X) -> list[XCoTSample]:
    out = [XCoTSample.from_record(x) if isinstance(x, dict) else x for x in X]
    if not all(isinstance(x, XCoTSample) for x in out):
        raise TypeError("X must contain XCoTSample objects or dataset records")
    return out


class XCoTGenerator(BaseEstimator):
    def __init__(self, d_model: int = 64, n_layers: int = 2, n_heads: int = 4, sft_steps: int = 4000,
                 sft_learning_rate: float = 3e-4, batch_size: int = 16, grpo_steps: int = 0,
                 grpo_learning_rate: float = 1e-5, rewards: str = "fit", trace: str = "xcot",
                 temperature: float = 0.8, grammar_mask: bool = False, random_state: int = 0):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.sft_steps = sft_steps
        self.sft_learning_rate = sft_learning_rate
        self.batch_size = batch_size
        self.grpo_steps = grpo_steps
        self.grpo_learning_rate = grpo_learning_rate
        self.rewards = rewards
        self.trace = trace
        self.temperature = temperature
        self.grammar_mask = grammar_mask
        self.random_state = random_state

    def _weights(self) -> RewardWeights:
        if not set(self.rewards) <= set("fit"):
            raise ValueError(f"rewards must be letters from 'fit', got {self.rewards!r}")
        return RewardWeights(*(float(c in self.rewards) for c in "fit"))

    def fit(self, X, y=None):
        samples = _as_samples(X)
        if self.grpo_steps and self.trace != "xcot":
            raise ValueError("GRPO fine-tuning needs the reasoning trace")
        policy_cfg = PolicyConfig(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads)
        warmup = min(200, max(0, self.sft_steps - 1))
        sft_cfg = SftConfig(steps=self.sft_steps, batch_size=self.batch_size, learning_rate=self.sft_learning_rate,
                            warmup_steps=warmup, seed=self.random_state, trace=self.trace)
        result = train_sft(sft_cfg, samples, policy_cfg)
        model, self.sft_metrics_ = result.model, result.metrics
        self.grpo_metrics_ = []
        if self.grpo_steps:
            cfg = GrpoConfig(steps=self.grpo_steps, learning_rate=self.grpo_learning_rate, seed=self.random_state)
            g = train_grpo(model, cfg, self._weights())
            model, self.grpo_metrics_ = g.model, g.metrics
        model.eval()
        self.model_ = model
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")

    def generate(self, X) -> list[list[int]]:
        """Raw sampled traces, one per input, with per-input seeds ``[random_state, i]``."""
        self._check_fitted()
        samples = _as_samples(X)
        max_new = 160 if self.trace == "xcot" else 70
        res = sample_contexts(self.model_, [s.context() for s in samples],
                              [[self.random_state, i] for i in range(len(samples))], self.temperature, max_new,
                              self.grammar_mask and self.trace == "xcot")
        return [r.tokens for r in res]

    def predict(self, X) -> list[np.ndarray | None]:
        return [extract_result(t, self.trace) for t in self.generate(X)]

    def score(self, X, y=None) -> float:
        """Mean total reward of one sample per input."""
        samples = _as_samples(X)
        traces = self.generate(samples)
        return float(np.mean([score_generation(t, s, self.trace, self._weights())["total"]
                              for t, s in zip(traces, samples)]))
