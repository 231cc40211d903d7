"""Autoregressive categorical policy over the unified token space.

A small pre-norm decoder-only transformer with learned positional embeddings.
Gradients come from torch autograd; ``tests/test_gradients.py`` checks them
against double-precision central differences.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .trace_format import TraceFSM
from .vocab import EOS, default_vocab


class ContextTooLong(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int = 66
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    context_len: int = 256
    init_scale: float = 0.02
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.mlp_ratio, self.context_len) < 1:
            raise ValueError("policy dimensions must be positive")
        if self.init_scale < 0:
            raise ValueError("init_scale must be non-negative")


def expected_param_count(cfg: PolicyConfig) -> int:
    """Closed-form parameter count of :class:`DecoderPolicy`."""
    d, v, h = cfg.d_model, cfg.vocab_size, cfg.mlp_ratio * cfg.d_model
    per_layer = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d)
    head = v if cfg.tie_embeddings else d * v + v
    return v * d + cfg.context_len * d + cfg.n_layers * per_layer + 2 * d + head


class Block(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc = nn.Linear(d, cfg.mlp_ratio * d)
        self.out = nn.Linear(cfg.mlp_ratio * d, d)

    def forward(self, x: torch.Tensor, cache: dict | None, start: int) -> torch.Tensor:
        b, t, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q = q.view(b, t, self.n_heads, hd).transpose(1, 2)
        k = k.view(b, t, self.n_heads, hd).transpose(1, 2)
        v = v.view(b, t, self.n_heads, hd).transpose(1, 2)
        if cache is not None:
            if "k" in cache:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        if t == 1:
            y = F.scaled_dot_product_attention(q, k, v)
        elif k.shape[2] == t:
            y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        else:
            qpos = torch.arange(start, start + t).unsqueeze(1)
            kpos = torch.arange(k.shape[2]).unsqueeze(0)
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=kpos <= qpos)
        y = y.transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(y)
        return x + self.out(F.gelu(self.fc(self.ln2(x))))


class DecoderPolicy(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.config = cfg
        self.tok_emb = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        self.pos_emb = nn.Parameter(torch.empty(cfg.context_len, cfg.d_model))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        if cfg.tie_embeddings:
            self.head_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        else:
            self.head = nn.Linear(cfg.d_model, cfg.vocab_size)

    def forward(self, tokens: torch.Tensor, caches: list[dict] | None = None, start: int = 0) -> torch.Tensor:
        """Logits of shape ``(batch, len, vocab)`` for tokens at positions ``start..``."""
        t = tokens.shape[1]
        if start + t > self.config.context_len:
            raise ContextTooLong(f"sequence of {start + t} exceeds context_len {self.config.context_len}")
        x = self.tok_emb[tokens] + self.pos_emb[start:start + t]
        for i, block in enumerate(self.blocks):
            x = block(x, None if caches is None else caches[i], start)
        x = self.ln_f(x)
        if self.config.tie_embeddings:
            return x @ self.tok_emb.T + self.head_bias
        return self.head(x)


def init_params(config: PolicyConfig, seed: int) -> DecoderPolicy:
    """Deterministic initialization: N(0, init_scale) weights, zero biases, unit norm gains."""
    model = DecoderPolicy(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias") or name == "head_bias":
                p.zero_()
            elif ".ln" in name or name.startswith("ln_f"):
                p.fill_(1.0)
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * config.init_scale)
    return model


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def flat_params(model: nn.Module) -> torch.Tensor:
    return torch.nn.utils.parameters_to_vector(model.parameters()).detach().clone()


def set_flat_params(model: nn.Module, vec: torch.Tensor) -> None:
    torch.nn.utils.vector_to_parameters(vec.to(next(model.parameters()).dtype), model.parameters())


def clone_policy(model: DecoderPolicy) -> DecoderPolicy:
    other = DecoderPolicy(model.config).to(next(model.parameters()).dtype)
    other.load_state_dict(model.state_dict())
    return other


def _as_tensor(tokens: Sequence[int]) -> torch.Tensor:
    return torch.as_tensor(list(tokens), dtype=torch.long).unsqueeze(0)


def forward_logits(model: DecoderPolicy, context_tokens: Sequence[int]) -> torch.Tensor:
    with torch.no_grad():
        return model(_as_tensor(context_tokens))[0]


def token_logprobs(model: DecoderPolicy, tokens: torch.Tensor) -> torch.Tensor:
    """Teacher-forced ``log p(tokens[:, t+1] | tokens[:, :t+1])`` with shape ``(batch, len-1)``."""
    logits = model(tokens[:, :-1])
    return logits.log_softmax(-1).gather(-1, tokens[:, 1:].unsqueeze(-1)).squeeze(-1)


def log_prob(model: DecoderPolicy, context: Sequence[int], continuation: Sequence[int]) -> torch.Tensor:
    """Per-token log-probabilities of ``continuation`` given ``context`` (no gradient)."""
    if not context:
        raise ValueError("context must contain at least one token")
    seq = _as_tensor([*context, *continuation])
    with torch.no_grad():
        return token_logprobs(model, seq)[0, len(context) - 1:]


@dataclass
class SampleOptions:
    temperature: float = 1.0
    max_new_tokens: int = 160
    rng_seed: int | Sequence[int] = 0
    grammar_mask: bool = False

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")


@dataclass
class SampleResult:
    tokens: list[int]
    logprobs: list[float]
    uniforms: list[float] = field(default_factory=list)


def choose_token(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw from a (possibly unnormalized) probability vector."""
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(probs) - 1))


def _distribution(logits: np.ndarray, temperature: float, mask: np.ndarray | None) -> np.ndarray:
    z = logits.astype(np.float64)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z / temperature
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def sample_batch(model: DecoderPolicy, context: Sequence[int], seeds: Sequence, temperature: float = 1.0,
                 max_new_tokens: int = 160, grammar_mask: bool = False) -> list[SampleResult]:
    """Ancestral sampling of ``len(seeds)`` continuations of one shared context.

    Each member draws its uniforms from its own generator, so a member's trace
    depends only on its seed. Returned log-probs are at temperature 1, unmasked.
    """
    contexts = [list(context)] * len(seeds)
    return sample_contexts(model, contexts, seeds, temperature, max_new_tokens, grammar_mask)


def sample_contexts(model: DecoderPolicy, contexts: Sequence[Sequence[int]], seeds: Sequence,
                    temperature: float = 1.0, max_new_tokens: int = 160,
                    grammar_mask: bool = False) -> list[SampleResult]:
    """Batched sampling over equal-length contexts, one seed per row."""
    if len({len(c) for c in contexts}) != 1:
        raise ValueError("contexts in a batch must have equal length")
    n, ctx_len = len(contexts), len(contexts[0])
    if ctx_len + max_new_tokens > model.config.context_len:
        raise ContextTooLong(
            f"context {ctx_len} + max_new_tokens {max_new_tokens} exceeds {model.config.context_len}"
        )
    rngs = [np.random.default_rng(s) for s in seeds]
    fsms = [TraceFSM(default_vocab()) for _ in range(n)] if grammar_mask else None
    results = [SampleResult([], []) for _ in range(n)]
    alive = np.ones(n, dtype=bool)
    caches = [dict() for _ in model.blocks]
    with torch.no_grad():
        logits = model(torch.as_tensor([list(c) for c in contexts], dtype=torch.long), caches, 0)[:, -1]
        pos = ctx_len
        for step in range(max_new_tokens):
            logp = logits.log_softmax(-1).numpy()
            raw = logits.numpy()
            nxt = np.zeros(n, dtype=np.int64)
            for i in np.flatnonzero(alive):
                mask = fsms[i].allowed_tokens(max_new_tokens - step) if fsms else None
                if temperature == 0:
                    z = raw[i] if mask is None else np.where(mask, raw[i], -np.inf)
                    tok = int(np.argmax(z))
                else:
                    u = float(rngs[i].random())
                    results[i].uniforms.append(u)
                    tok = choose_token(_distribution(raw[i], temperature, mask), u)
                if fsms:
                    fsms[i].step(tok)
                results[i].tokens.append(tok)
                results[i].logprobs.append(float(logp[i, tok]))
                nxt[i] = tok
                if tok == EOS:
                    alive[i] = False
            if not alive.any() or step == max_new_tokens - 1:
                break
            logits = model(torch.as_tensor(nxt).unsqueeze(1), caches, pos)[:, -1]
            pos += 1
    return results


def sample(model: DecoderPolicy, context: Sequence[int], options: SampleOptions) -> SampleResult:
    return sample_batch(model, context, [options.rng_seed], options.temperature,
                        options.max_new_tokens, options.grammar_mask)[0]


def backward(model: DecoderPolicy, loss_fn: Callable[..., torch.Tensor], *inputs, **kwargs) -> torch.Tensor:
    """Flat gradient of ``loss_fn(model, *inputs)`` with respect to every parameter."""
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model, *inputs, **kwargs)
    params = list(model.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([
        (torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)
    ]).detach()


# -- checkpoint codec -----------------------------------------------------------

MAGIC = b"XCF1"
VERSION = 1


def encode_checkpoint(model: DecoderPolicy, extra: dict | None = None) -> bytes:
    """``XCF1 | u32 version | u32 len + config JSON | u32 n tensors | tensors | sha256``.

    Each tensor: ``u16 name len, name, u32 ndim, u32 dims..., float32 LE row-major``.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta = json.dumps({"config": asdict(model.config), "extra": extra or {}}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode()
        arr = tensor.detach().to(torch.float32).contiguous().numpy()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(data: bytes) -> tuple[DecoderPolicy, dict]:
    if len(data) < 48 or data[:4] != MAGIC:
        raise CheckpointError("not an XCF1 checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off:off + meta_len])
    off += meta_len
    model = DecoderPolicy(PolicyConfig(**meta["config"]))
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", body, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint body")
    model.load_state_dict(state)
    return model, meta.get("extra", {})


def save_checkpoint(path, model: DecoderPolicy, extra: dict | None = None) -> str:
    data = encode_checkpoint(model, extra)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[DecoderPolicy, dict]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)
