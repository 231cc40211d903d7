"""Command-line entry point: ``xcotgrid <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import pipeline
from .config import ConfigError, load_config
from .evaluate import ZeroShotViolation, ablation_from_reports, build_bench, run_benchmark
from .policy import CheckpointError, SampleOptions, load_checkpoint, sample
from .rewards import RewardWeights, score_trace
from .trace_format import parse, validate
from .vocab import UnknownWord, default_vocab
from .world import (
    POSITION_NAMES,
    SceneSpec,
    build_context,
    make_focus,
    parse_prompt,
    render,
    write_ppm,
)

log = logging.getLogger("xcotgrid")


class UsageError(ValueError):
    pass


def _config(args):
    return load_config(args.config, args.set or [])


def _parse_scene(text: str) -> SceneSpec:
    """``glyph,color,background,anchor``; the anchor may be an index or a position name."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise UsageError("scene must be glyph,color,background,anchor")
    try:
        anchor = POSITION_NAMES.index(parts[3]) if parts[3] in POSITION_NAMES else int(parts[3])
        return SceneSpec(int(parts[0]), int(parts[1]), int(parts[2]), anchor)
    except ValueError as exc:
        raise UsageError(f"invalid scene {text!r}: {exc}") from exc


def _parse_rewards(text: str | None, default: RewardWeights) -> RewardWeights:
    if text is None:
        return default
    chosen = set(text.split(","))
    if not chosen <= {"f", "i", "t"}:
        raise UsageError("--rewards takes a comma list drawn from f,i,t")
    return RewardWeights(float("f" in chosen), float("i" in chosen), float("t" in chosen), default.gating)


def cmd_gen_data(args) -> int:
    manifest = pipeline.gen_data(_config(args), args.out)
    for split, info in manifest["splits"].items():
        print(f"{split}: {info['n']} records  sha256={info['sha256']}")
    print(f"vocab_hash={manifest['vocab_hash']}")
    return 0


def cmd_train_sft(args) -> int:
    manifest = pipeline.train_sft_stage(_config(args), args.data, args.out, baseline=args.baseline)
    for name, digest in manifest["outputs"].items():
        print(f"{name}  sha256={digest}")
    return 0


def cmd_train_grpo(args) -> int:
    cfg = _config(args)
    weights = _parse_rewards(args.rewards, cfg.rewards)
    manifest = pipeline.train_grpo_stage(cfg, args.init, args.out, weights, args.dump_rollouts)
    for name, digest in manifest["outputs"].items():
        print(f"{name}  sha256={digest}")
    return 0


def _train_combos(path):
    if path is None:
        return None
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    if "splits" in manifest:
        return manifest["splits"]["train"]["combos"]
    return manifest.get("train_combos")


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.oracle:
        from .evaluate import OraclePolicy

        e = cfg.eval
        bench = build_bench(e.bench_seed, e.prompts_per_combo)
        report = run_benchmark(OraclePolicy(bench.cases), bench, e.temperature, e.samples_per_case, e.seed,
                               train_combos=_train_combos(args.train_manifest), weights=cfg.rewards,
                               metadata={"checkpoint_sha256": None, "policy": "oracle"})
    else:
        if args.ckpt is None:
            raise UsageError("eval needs --ckpt or --oracle")
        report = pipeline.eval_stage(cfg, args.ckpt, args.grammar_mask, _train_combos(args.train_manifest))
    Path(args.report).write_text(report.to_json(), encoding="utf-8")
    print(json.dumps(report.means, sort_keys=True))
    return 0


def cmd_ablation(args) -> int:
    """Matrix spec JSON: ``{"variants": {name: [ckpt, ...]}, "config": path?, "set": [...]}``."""
    spec = json.loads(Path(args.matrix).read_text(encoding="utf-8"))
    cfg = load_config(spec.get("config") or args.config, list(spec.get("set", [])) + (args.set or []))
    base = Path(args.matrix).parent
    e = cfg.eval
    bench = build_bench(e.bench_seed, e.prompts_per_combo)
    reports = {}
    for name, ckpts in spec["variants"].items():
        ckpts = [ckpts] if isinstance(ckpts, str) else ckpts
        reports[name] = []
        for c in ckpts:
            policy, digest = pipeline.checkpoint_policy(base / c)
            combos = pipeline.read_manifest((base / c).parent).get("train_combos")
            reports[name].append(run_benchmark(policy, bench, e.temperature, e.samples_per_case, e.seed,
                                               train_combos=combos, weights=cfg.rewards,
                                               metadata={"checkpoint_sha256": digest}))
    table = ablation_from_reports(reports)
    Path(args.report).write_text(table.to_json(), encoding="utf-8")
    Path(args.report).with_suffix(".txt").write_text(table.to_text(), encoding="utf-8")
    print(table.to_text(), end="")
    if args.assert_verdicts and not all(v.passed for v in table.verdicts):
        return 1
    return 0


def cmd_sample(args) -> int:
    vocab = default_vocab()
    scene = _parse_scene(args.scene)
    try:
        prompt_tokens = vocab.encode_text(args.prompt.split())
        prompt = parse_prompt(prompt_tokens)
    except (UnknownWord, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    try:
        model, _ = load_checkpoint(args.ckpt)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    model.eval()
    reference = render(scene)
    context = build_context(prompt_tokens, reference)
    opts = SampleOptions(args.temperature, args.max_new_tokens, args.seed, args.grammar_mask)
    result = sample(model, context, opts)
    print(vocab.decode(result.tokens))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    breakdown = score_trace(result.tokens, scene, prompt)
    if validate(result.tokens).accepted:
        seg = parse(result.tokens)
        print("understanding:", " ".join(vocab.decode_words(seg.think_a)))
        print("plan:", " ".join(vocab.decode_words(seg.think_b)))
        write_ppm(out / "focus.ppm", [seg.focus_image])
        write_ppm(out / "result.ppm", [seg.result_image])
        write_ppm(out / "triptych.ppm", [reference, seg.focus_image, seg.result_image])
    else:
        print(f"trace rejected: {validate(result.tokens).to_dict()}")
    write_ppm(out / "reference.ppm", [reference])
    print(json.dumps(breakdown.to_dict(), sort_keys=True))
    return 0


def cmd_render(args) -> int:
    scene = _parse_scene(args.scene)
    images = [render(scene)]
    if args.with_focus:
        images.append(make_focus(scene.glyph_id, scene.subject_color))
    write_ppm(args.out, images, scale=args.scale)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xcotgrid", description=__doc__)
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 is bit-deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run config (profile + section overrides)")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. sft.steps=100")
        return sp

    sp = common(sub.add_parser("gen-data", help="synthesize the reasoning-trace dataset"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train-sft", help="cold-start supervised training"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--baseline", action="store_true", help="train the no-reasoning direct baseline")
    sp.set_defaults(func=cmd_train_sft)

    sp = common(sub.add_parser("train-grpo", help="GRPO fine-tuning from an SFT checkpoint"))
    sp.add_argument("--init", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--rewards", help="subset of f,i,t (default: config weights)")
    sp.add_argument("--dump-rollouts", action="store_true")
    sp.set_defaults(func=cmd_train_grpo)

    sp = common(sub.add_parser("eval", help="benchmark a checkpoint on held-out subjects"))
    sp.add_argument("--ckpt")
    sp.add_argument("--oracle", action="store_true", help="replay ground-truth traces instead")
    sp.add_argument("--grammar-mask", action="store_true")
    sp.add_argument("--train-manifest", help="data or checkpoint manifest listing training combos")
    sp.add_argument("--report", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("ablation", help="compare variants and emit directional verdicts"))
    sp.add_argument("--matrix", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--assert", dest="assert_verdicts", action="store_true",
                    help="exit nonzero when any verdict fails")
    sp.set_defaults(func=cmd_ablation)

    sp = sub.add_parser("sample", help="generate one trace and write PPM images")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--prompt", required=True, help='e.g. "the subject at center on grass"')
    sp.add_argument("--scene", required=True, help="glyph,color,background,anchor")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--temperature", type=float, default=0.8)
    sp.add_argument("--max-new-tokens", type=int, default=160)
    sp.add_argument("--grammar-mask", action="store_true")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("render", help="render a scene to PPM")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--with-focus", action="store_true")
    sp.add_argument("--scale", type=int, default=8)
    sp.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits 2
    except (ConfigError, pipeline.HashMismatch, ZeroShotViolation, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
