import json

import numpy as np
import pytest

from xcotgrid import rewards
from xcotgrid.evaluate import (
    METRICS,
    EvalReport,
    ModelPolicy,
    OraclePolicy,
    VerdictRule,
    ZeroShotViolation,
    ablation_from_reports,
    build_bench,
    check_zero_shot,
    extract_result,
    judge,
    metric_image_similarity,
    metric_subject_fidelity,
    metric_text_alignment,
    run_ablation_matrix,
    run_benchmark,
)
from xcotgrid.policy import PolicyConfig, init_params
from xcotgrid.world import ANCHORS, BACKGROUND_COLORS, EVAL_COMBOS, TRAIN_COMBOS


@pytest.fixture(scope="module")
def bench():
    return build_bench(0)


def test_bench_structure(bench):
    assert len(bench.cases) == 80
    assert bench.combos == set(EVAL_COMBOS)
    assert not bench.combos & set(TRAIN_COMBOS)
    for combo in EVAL_COMBOS:
        prompts = [c.prompt for c in bench.cases if c.reference_scene.combo == combo]
        assert len(prompts) == 10
        assert {p.target_anchor for p in prompts} == set(range(len(ANCHORS)))
        assert {p.target_background for p in prompts} == set(BACKGROUND_COLORS)
    assert build_bench(0).to_jsonl() == bench.to_jsonl()
    assert build_bench(1).digest() != bench.digest()


def test_metrics_share_reward_implementation():
    assert metric_subject_fidelity is rewards.reward_subject
    assert metric_text_alignment is rewards.reward_text


def test_image_similarity():
    a = np.zeros((8, 8), dtype=int)
    b = a.copy()
    b[0, :4] = 3
    assert metric_image_similarity(a, a) == 1.0
    assert metric_image_similarity(a, b) == pytest.approx(60 / 64)


def test_oracle_scores_perfectly(bench):
    rep = run_benchmark(OraclePolicy(bench.cases), bench)
    for m in ("subject_fidelity", "text_alignment", "format_valid"):
        assert rep.means[m] == 1.0
    assert rep.means["total"] == 3.0
    assert rep.means["image_similarity"] < 1.0
    direct = run_benchmark(OraclePolicy(bench.cases, "direct"), bench)
    assert direct.means["total"] == 3.0


def test_means_are_exact_averages(bench):
    rep = run_benchmark(OraclePolicy(bench.cases), bench, n_samples_per_case=1)
    for m in METRICS:
        assert rep.means[m] == float(np.mean([c[m] for c in rep.cases]))


def test_random_policy_fails_format(bench):
    pol = ModelPolicy(init_params(PolicyConfig(d_model=16, n_layers=1, n_heads=2, init_scale=0.5), 0))
    rep = run_benchmark(pol, bench, n_samples_per_case=1)
    assert rep.means["format_valid"] == 0.0 and rep.means["total"] == 0.0
    masked = run_benchmark(pol, bench, n_samples_per_case=1, grammar_mask=True)
    assert masked.means["format_valid"] == 1.0


def test_report_deterministic(bench, tiny_sft_model):
    pol = ModelPolicy(tiny_sft_model)
    a = run_benchmark(pol, bench, n_samples_per_case=1, metadata={"ckpt": "x"})
    b = run_benchmark(pol, bench, n_samples_per_case=1, metadata={"ckpt": "x"})
    assert a.to_json() == b.to_json()
    assert json.loads(a.to_json())["metadata"]["ckpt"] == "x"
    c = run_benchmark(pol, bench, n_samples_per_case=1, seed=9)
    assert c.to_json() != a.to_json()


def test_zero_shot_refusal(bench):
    check_zero_shot(bench, TRAIN_COMBOS)
    with pytest.raises(ZeroShotViolation):
        check_zero_shot(bench, [*TRAIN_COMBOS, list(EVAL_COMBOS[3])])
    with pytest.raises(ZeroShotViolation):
        run_benchmark(OraclePolicy(bench.cases), bench, train_combos=[EVAL_COMBOS[0]])


def test_extract_result(bench):
    case = bench.cases[0]
    assert np.array_equal(extract_result(case.trace()), case.result_image)
    assert np.array_equal(extract_result(case.direct_trace(), "direct"), case.result_image)
    assert extract_result(case.trace(), "direct") is None
    assert extract_result(case.direct_trace()) is None


def _report(**means):
    return EvalReport([], {m: means.get(m, 0.0) for m in METRICS}, {})


def test_judge_modes():
    maj = VerdictRule("a", "b", "total", "majority", 0.05)
    assert judge(maj, [1.06, 1.06, 1.0], [1.0, 1.0, 1.0]).passed
    assert not judge(maj, [1.04, 1.06, 1.0], [1.0, 1.0, 1.0]).passed
    assert judge(maj, [2.1, 2.1], [2.0, 2.0]).passed  # the gain threshold is inclusive
    assert not judge(VerdictRule("a", "b", "total"), [2.0], [2.0]).passed
    med = VerdictRule("a", "b", "total", "median")
    assert judge(med, [0.1, 0.5, 0.9], [0.4, 0.4, 0.4]).passed
    assert not judge(med, [0.4], [0.4]).passed
    with pytest.raises(ValueError):
        judge(maj, [1.0], [1.0, 2.0])


def test_ablation_single_row_no_verdicts():
    table = ablation_from_reports({"sft_xcot": [_report(total=2.0)]})
    assert len(table.rows) == 1 and table.verdicts == []


def test_ablation_sorted_and_verdict_matches_direct_comparison():
    reports = {
        "grpo_f": [_report(subject_fidelity=0.2, text_alignment=0.5)],
        "grpo_fi": [_report(subject_fidelity=0.9, text_alignment=0.4)],
        "grpo_ft": [_report(subject_fidelity=0.5, text_alignment=0.8)],
    }
    table = ablation_from_reports(reports)
    assert [r["variant"] for r in table.rows] == ["grpo_fi", "grpo_ft", "grpo_f"]
    assert [v.passed for v in table.verdicts] == [True, True]
    text = table.to_text()
    assert text.splitlines()[0].startswith("variant") and "[PASS]" in text


def test_run_ablation_matrix(bench):
    table = run_ablation_matrix({"sft_xcot": OraclePolicy(bench.cases),
                                 "base_no_cot": [OraclePolicy(bench.cases, "direct")]},
                                bench, n_samples_per_case=1)
    assert len(table.rows) == 2
    # both perfect, so "strictly better" fails
    assert [v.passed for v in table.verdicts] == [False]
