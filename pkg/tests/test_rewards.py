import numpy as np
import pytest

from xcotgrid.rewards import (
    RewardBreakdown,
    RewardWeights,
    reward_format,
    reward_subject,
    reward_text,
    score_trace,
    subject_match,
)
from xcotgrid.trace_format import mutate_for_test
from xcotgrid.vocab import THINK_CLOSE
from xcotgrid.world import ANCHORS, GLYPHS, PromptSpec, SceneSpec, make_sample, render, synth_sample


def brute_subject(img, scene):
    """Second, loop-only implementation of the placement scan."""
    mask = GLYPHS[scene.glyph_id]
    pop = int(mask.sum())
    best, where = -1, None
    for r in range(6):
        for c in range(6):
            n = 0
            for dr in range(3):
                for dc in range(3):
                    if mask[dr][dc] and img[r + dr][c + dc] == scene.subject_color:
                        n += 1
            if n > best:
                best, where = n, (r, c)
    return (0.0, None) if best == 0 else (best / pop, where)


def seven_cell_glyph():
    return next(g for g in range(16) if GLYPHS[g].sum() == 7)


def test_format_reward(train_samples):
    t = train_samples[0].trace()
    assert reward_format(t) == 1.0
    assert reward_format(t[:-30]) == 0.0
    close = t.index(THINK_CLOSE)
    assert reward_format(mutate_for_test(t, "substitute_structural", close)) == 0.0


def test_subject_perfect_anywhere():
    for a in range(9):
        scene = SceneSpec(5, 6, 1, a)
        assert reward_subject(render(SceneSpec(5, 6, 3, (a + 4) % 9)), scene) == 1.0


def test_subject_uniform_background():
    scene = SceneSpec(5, 6, 1, 0)
    assert reward_subject(np.full((8, 8), 2), scene) == 0.0


def test_subject_two_wrong_cells():
    g = seven_cell_glyph()
    scene = SceneSpec(g, 4, 0, 4)
    img = render(scene)
    r0, c0 = ANCHORS[4]
    cells = np.argwhere(GLYPHS[g] == 1)[:2]
    for dr, dc in cells:
        img[r0 + dr, c0 + dc] = 5
    expected, _ = brute_subject(img, scene)
    assert expected == pytest.approx(5 / 7)
    assert reward_subject(img, scene) == pytest.approx(expected)


def test_text_exact_target():
    s = make_sample(SceneSpec(3, 4, 0, 0), PromptSpec(4, 2))
    assert reward_text(s.result_image, s.prompt, s.reference_scene) == 1.0


def test_text_wrong_background():
    scene, prompt = SceneSpec(3, 4, 0, 0), PromptSpec(4, 2)
    img = render(SceneSpec(3, 4, 1, 4))  # right place, every background cell wrong
    assert reward_text(img, prompt, scene) == 0.5


def test_text_anchor_distance_three():
    # prompt asks for center (2,2); glyph drawn at (5,2): manhattan distance 3
    g = 0
    scene, prompt = SceneSpec(g, 4, 0, 0), PromptSpec(4, 2)
    img = render(SceneSpec(g, 4, 2, 7))
    assert ANCHORS[7] == (5, 2)
    _, best = brute_subject(img, scene)
    assert best == (5, 2)
    foot = np.zeros((8, 8), bool)
    foot[5:8, 2:5] = GLYPHS[g].astype(bool)
    bg = sum(1 for r in range(8) for c in range(8) if not foot[r, c] and img[r, c] == 2) / (64 - foot.sum())
    assert bg == 1.0
    assert reward_text(img, prompt, scene) == pytest.approx((0.5 + bg) / 2)


def test_score_trace_engine_sample():
    s = synth_sample([9, 9])
    b = score_trace(s.trace(), s.reference_scene, s.prompt)
    assert (b.r_f, b.r_i, b.r_t, b.total) == (1.0, 1.0, 1.0, 3.0)


def test_score_trace_invalid_is_gated():
    s = synth_sample([9, 10])
    b = score_trace(s.trace()[:-1], s.reference_scene, s.prompt)
    assert b == RewardBreakdown(0.0, 0.0, 0.0, 0.0, None)


def test_score_trace_blank_result():
    s = synth_sample([9, 11])
    trace = s.trace()
    # overwrite the result payload with the prompt's background everywhere
    bg_token = 9 + 49 + s.prompt.target_background
    trace[-66:-2] = [bg_token] * 64
    b = score_trace(trace, s.reference_scene, s.prompt)
    # no glyph cell matches: r_i = 0, no placement, position term 0, background term over all 64 cells = 1
    assert b.r_f == 1.0 and b.r_i == 0.0 and b.best_match_anchor is None
    assert b.r_t == pytest.approx(0.5)
    assert b.total == pytest.approx(1.0 + 0.5)


def test_ungated_scoring_salvages_result():
    s = synth_sample([9, 12])
    bad = s.trace()[:-1]
    b = score_trace(bad, s.reference_scene, s.prompt, RewardWeights(gating=False))
    assert b.r_f == 0.0 and b.r_i == 1.0 and b.r_t == 1.0


def test_weights_validation():
    with pytest.raises(ValueError):
        RewardWeights(0, 0, 0)
    with pytest.raises(ValueError):
        RewardWeights(-1, 1, 1)


def test_bounded_and_oracle_equivalent(rng):
    for i in range(10000):
        img = rng.integers(0, 8, (8, 8))
        scene = SceneSpec(int(rng.integers(16)), int(rng.integers(4, 8)), int(rng.integers(4)), int(rng.integers(9)))
        prompt = PromptSpec(int(rng.integers(9)), int(rng.integers(4)))
        ri, best = subject_match(img, scene)
        rt = reward_text(img, prompt, scene)
        assert 0.0 <= ri <= 1.0 and 0.0 <= rt <= 1.0
        if i < 1000:
            assert (ri, best) == brute_subject(img, scene)


def test_monotone_fix_one_cell(rng):
    for _ in range(500):
        scene = SceneSpec(int(rng.integers(16)), int(rng.integers(4, 8)), int(rng.integers(4)), int(rng.integers(9)))
        img = render(scene)
        noise = rng.random((8, 8)) < 0.3
        img[noise] = rng.integers(0, 8, noise.sum())
        before = reward_subject(img, scene)
        r0, c0 = ANCHORS[scene.anchor]
        wrong = [(r0 + dr, c0 + dc) for dr, dc in np.argwhere(GLYPHS[scene.glyph_id] == 1)
                 if img[r0 + dr, c0 + dc] != scene.subject_color]
        if wrong:
            r, c = wrong[int(rng.integers(len(wrong)))]
            img[r, c] = scene.subject_color
            assert reward_subject(img, scene) >= before
