"""Independent oracles shared by unit and acceptance tests."""
import numpy as np
import torch

from xcotgrid.grpo import GroupRollout, compute_advantages, sequence_logprobs
from xcotgrid.policy import PolicyConfig, init_params
from xcotgrid.vocab import EOS, IMG_BEGIN, IMG_END, THINK_CLOSE, THINK_OPEN, default_vocab

TINY = dict(vocab_size=66, d_model=8, n_layers=1, n_heads=1, mlp_ratio=4, context_len=16)


def tiny_model(seed, init_scale=0.5, **overrides):
    cfg = PolicyConfig(**{**TINY, "init_scale": init_scale, **overrides})
    return init_params(cfg, seed).double()


def fd_gradient(model, loss_closure, coords, h=1e-3):
    """Central differences of ``loss_closure()`` along flat parameter ``coords`` (double precision)."""
    params = list(model.parameters())
    sizes = np.cumsum([0] + [p.numel() for p in params])
    out = np.zeros(len(coords))
    with torch.no_grad():
        for j, k in enumerate(coords):
            pi = int(np.searchsorted(sizes, k, side="right") - 1)
            flat = params[pi].view(-1)
            idx = int(k - sizes[pi])
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = float(loss_closure())
            flat[idx] = orig - h
            down = float(loss_closure())
            flat[idx] = orig
            out[j] = (up - down) / (2 * h)
    return out


def relative_error(analytic, numeric):
    """Norm-wise relative error over the probed coordinates."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def random_batch(rng, batch=3, length=12, vocab=66, context=5):
    tokens = torch.as_tensor(rng.integers(0, vocab, (batch, length)))
    mask = torch.zeros((batch, length))
    mask[:, context:] = 1.0
    return tokens, mask


def tiny_rollouts(model, rng, n_groups=2, group_size=3, context=4, max_trace=10, old_model=None):
    """Random miniature rollouts; old log-probs come from ``old_model`` (default: ``model``)."""
    rollouts = []
    for _ in range(n_groups):
        ctx = [int(x) for x in rng.integers(0, 66, context)]
        traces = [[int(x) for x in rng.integers(0, 66, rng.integers(2, max_trace + 1))] for _ in range(group_size)]
        rollouts.append(GroupRollout(context=ctx, traces=traces, old_logprobs=[], member_seeds=[]))
    for ro, lps in zip(rollouts, sequence_logprobs(old_model or model, rollouts)):
        ro.old_logprobs = lps
        ro.advantages = compute_advantages(rng.random(group_size))
    return rollouts


def perturbed_copy(model, scale, seed):
    other = type(model)(model.config).double()
    other.load_state_dict(model.state_dict())
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in other.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return other


_V = default_vocab()
TEXT = list(range(_V.n_structural, _V.image_offset))
COLORS = list(range(_V.image_offset, _V.size))


def random_trace(rng, max_words=6):
    """Grammar-directed generator, independent of the FSM."""
    a = [int(x) for x in rng.choice(TEXT, rng.integers(1, max_words + 1))]
    b = [int(x) for x in rng.choice(TEXT, rng.integers(1, max_words + 1))]
    f = [int(x) for x in rng.choice(COLORS, 64)]
    r = [int(x) for x in rng.choice(COLORS, 64)]
    return [THINK_OPEN, *a, IMG_BEGIN, *f, IMG_END, *b, THINK_CLOSE, IMG_BEGIN, *r, IMG_END, EOS]
