import math

import numpy as np
import pytest
import torch

from xcotgrid.policy import (
    CheckpointError,
    ContextTooLong,
    PolicyConfig,
    SampleOptions,
    choose_token,
    decode_checkpoint,
    encode_checkpoint,
    expected_param_count,
    forward_logits,
    init_params,
    log_prob,
    param_count,
    sample,
    sample_batch,
)
from xcotgrid.trace_format import validate
from xcotgrid.world import synth_sample

SMALL = PolicyConfig(vocab_size=66, d_model=8, n_layers=1, n_heads=1, mlp_ratio=4, context_len=16)


def test_param_count_closed_form():
    # tok 66*8, pos 16*8, layer: ln 2*8, qkv 8*24+24, proj 8*8+8, ln 2*8, fc 8*32+32, out 32*8+8,
    # final ln 2*8, head 8*66+66
    by_hand = 528 + 128 + (16 + 216 + 72 + 16 + 288 + 264) + 16 + 594
    assert by_hand == 2138
    assert expected_param_count(SMALL) == by_hand
    assert param_count(init_params(SMALL, 0)) == by_hand
    for cfg in (PolicyConfig(d_model=64, n_layers=2), PolicyConfig(), PolicyConfig(tie_embeddings=True)):
        assert param_count(init_params(cfg, 0)) == expected_param_count(cfg)


def test_init_deterministic():
    a, b = init_params(SMALL, 3), init_params(SMALL, 3)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    c = init_params(SMALL, 4)
    assert not torch.equal(a.tok_emb, c.tok_emb)


def test_zero_init_uniform():
    m = init_params(PolicyConfig(**{**SMALL.__dict__, "init_scale": 0.0}), 0)
    probs = forward_logits(m, [1, 5, 9, 20]).softmax(-1)
    assert torch.allclose(probs, torch.full_like(probs, 1 / 66))
    lp = log_prob(m, [1, 5], [9, 20, 30])
    assert torch.allclose(lp, torch.full_like(lp, -math.log(66)))


def test_causal_prefix_property(rng):
    m = init_params(SMALL, 1)
    m.config  # noqa: B018
    for _ in range(20):
        seq = [int(x) for x in rng.integers(0, 66, 16)]
        full = forward_logits(m, seq)
        k = int(rng.integers(1, 16))
        assert torch.allclose(forward_logits(m, seq[:k]), full[:k], atol=1e-6)
        other = list(seq)
        other[k] = (other[k] + 1) % 66
        assert torch.allclose(forward_logits(m, other)[:k], full[:k], atol=1e-6)


def test_finite_and_normalized(rng):
    m = init_params(PolicyConfig(**{**SMALL.__dict__, "init_scale": 2.0}), 2)
    logits = forward_logits(m, [int(x) for x in rng.integers(0, 66, 16)])
    assert torch.isfinite(logits).all()
    assert torch.allclose(logits.double().softmax(-1).sum(-1), torch.ones(16, dtype=torch.float64), atol=1e-6)


def test_log_prob_normalizes():
    m = init_params(SMALL, 5)
    ctx = [1, 2, 3]
    total = sum(math.exp(float(log_prob(m, ctx, [t])[0])) for t in range(66))
    assert total == pytest.approx(1.0, abs=1e-5)
    assert (log_prob(m, ctx, [4, 5, 6]) <= 0).all()


def test_context_too_long():
    m = init_params(SMALL, 0)
    with pytest.raises(ContextTooLong):
        forward_logits(m, list(range(17)))
    with pytest.raises(ContextTooLong):
        sample(m, [1, 2, 3], SampleOptions(max_new_tokens=14))


def test_sampling_replay_oracle():
    """Replaying the recorded uniforms through full (uncached) forwards reproduces the tokens."""
    m = init_params(PolicyConfig(**{**SMALL.__dict__, "init_scale": 0.3}), 7)
    ctx = [1, 9, 10]
    for temp in (1.0, 0.7):
        res = sample(m, ctx, SampleOptions(temperature=temp, max_new_tokens=12, rng_seed=[4, 2]))
        seq = list(ctx)
        for u, tok in zip(res.uniforms, res.tokens):
            logits = forward_logits(m, seq)[-1].double().numpy() / temp
            p = np.exp(logits - logits.max())
            p /= p.sum()
            acc, pick = 0.0, len(p) - 1
            for i, pi in enumerate(p):
                acc += pi
                if u < acc:
                    pick = i
                    break
            assert pick == tok
            seq.append(tok)
        assert np.allclose(res.logprobs, log_prob(m, ctx, res.tokens).numpy(), atol=1e-5)


def test_choose_token_inverse_cdf():
    p = np.array([0.2, 0.3, 0.5])
    assert [choose_token(p, u) for u in (0.0, 0.19, 0.2, 0.49, 0.5, 0.999)] == [0, 0, 1, 1, 2, 2]


def test_sampling_deterministic():
    m = init_params(PolicyConfig(**{**SMALL.__dict__, "init_scale": 0.3}), 7)
    a = sample(m, [1, 2], SampleOptions(1.0, 10, 5))
    b = sample(m, [1, 2], SampleOptions(1.0, 10, 5))
    assert a.tokens == b.tokens and a.logprobs == b.logprobs
    g0 = sample(m, [1, 2], SampleOptions(0.0, 10, 1))
    g1 = sample(m, [1, 2], SampleOptions(0.0, 10, 2))
    assert g0.tokens == g1.tokens
    seq = [1, 2]
    for t in g0.tokens:
        assert t == int(forward_logits(m, seq)[-1].argmax())
        seq.append(t)


def test_batch_members_depend_only_on_seed():
    m = init_params(PolicyConfig(**{**SMALL.__dict__, "init_scale": 0.3}), 8)
    both = sample_batch(m, [1, 2], [[0, 1], [0, 2]], 1.0, 10)
    alone = sample_batch(m, [1, 2], [[0, 2]], 1.0, 10)
    assert both[1].tokens == alone[0].tokens


def test_grammar_mask_forces_valid_trace():
    m = init_params(PolicyConfig(d_model=16, n_layers=1, n_heads=2, init_scale=0.5), 0)
    ctx = synth_sample(1).context()
    for seed in range(3):
        res = sample(m, ctx, SampleOptions(1.0, 160, seed, grammar_mask=True))
        assert validate(res.tokens).accepted
    unmasked = sample(m, ctx, SampleOptions(1.0, 160, 0))
    assert not validate(unmasked.tokens).accepted


def test_checkpoint_round_trip_bit_exact():
    m = init_params(PolicyConfig(d_model=16, n_layers=2, n_heads=2), 3)
    data = encode_checkpoint(m, {"stage": "test"})
    assert data[:4] == b"XCF1"
    back, extra = decode_checkpoint(data)
    assert extra == {"stage": "test"}
    assert back.config == m.config
    for k, v in m.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
    assert encode_checkpoint(back, {"stage": "test"}) == data


def test_checkpoint_corruption_detected():
    data = bytearray(encode_checkpoint(init_params(SMALL, 0)))
    data[100] ^= 0xFF
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(data))
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOPE" + bytes(60))
