"""Pipeline stages with hash-pinned manifests; shared by the CLI and the acceptance suite."""
from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import RunConfig
from .evaluate import EvalReport, ModelPolicy, build_bench, run_benchmark
from .grpo import train_grpo
from .policy import load_checkpoint
from .rewards import RewardWeights
from .sft import EmptyDataset, train_sft
from .vocab import default_vocab
from .world import DatasetConfig, build_dataset, read_jsonl, sha256_file

MANIFEST = "manifest.json"


class HashMismatch(RuntimeError):
    pass


def write_manifest(out_dir: Path, stage: str, config: RunConfig, inputs: dict, outputs: list[str],
                   extra: dict | None = None) -> dict:
    manifest = {
        "stage": stage,
        "tool_version": __version__,
        "vocab_hash": default_vocab().hash(),
        "config": config.to_dict(),
        "inputs": inputs,
        "outputs": {name: sha256_file(out_dir / name) for name in outputs},
        **(extra or {}),
    }
    with open(out_dir / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FileNotFoundError(f"missing manifest {path}: {exc}") from exc


def verify_output(path: str | Path) -> str:
    """Check ``path`` against the manifest of its directory; return its sha256."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    manifest = read_manifest(path.parent)
    outputs = manifest.get("outputs", {})
    if path.name not in outputs:
        raise HashMismatch(f"{path.name} is not listed in {path.parent / MANIFEST}")
    digest = sha256_file(path)
    if digest != outputs[path.name]:
        raise HashMismatch(f"{path} does not match its manifest (expected {outputs[path.name]}, got {digest})")
    return digest


def _mkdir(out_dir: str | Path) -> Path:
    out = Path(out_dir)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory does not exist: {out.parent}")
    out.mkdir(exist_ok=True)
    return out


def gen_data(config: RunConfig, out_dir: str | Path) -> dict:
    out = _mkdir(out_dir)
    w = config.world
    data_manifest = build_dataset(DatasetConfig(w.n_train, w.n_eval, w.seed, str(out)))
    # the world manifest is extended in place with run metadata
    manifest = {
        **data_manifest,
        "stage": "gen-data",
        "tool_version": __version__,
        "config": config.to_dict(),
        "inputs": {},
        "outputs": {s["file"]: s["sha256"] for s in data_manifest["splits"].values()},
    }
    with open(out / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_data(data_dir: str | Path) -> tuple[list, list, dict]:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    train_path, eval_path = data_dir / "train.jsonl", data_dir / "eval.jsonl"
    verify_output(train_path)
    verify_output(eval_path)
    return read_jsonl(train_path), read_jsonl(eval_path), manifest


def train_sft_stage(config: RunConfig, data_dir: str | Path, out_dir: str | Path, baseline: bool = False) -> dict:
    train, heldout, data_manifest = load_data(data_dir)
    if not train:
        raise EmptyDataset(f"training split in {data_dir} is empty")
    out = _mkdir(out_dir)
    sft_cfg = replace(config.sft, trace="direct" if baseline else "xcot")
    train_sft(sft_cfg, train, config.policy, heldout=heldout, out_dir=out)
    inputs = {"train.jsonl": data_manifest["outputs"]["train.jsonl"],
              "eval.jsonl": data_manifest["outputs"]["eval.jsonl"]}
    return write_manifest(out, "train-sft", config, inputs, ["final.xcf", "best.xcf", "metrics.jsonl"],
                          {"trace": sft_cfg.trace,
                           "train_combos": data_manifest["splits"]["train"]["combos"]})


def train_grpo_stage(config: RunConfig, init_ckpt: str | Path, out_dir: str | Path,
                     weights: RewardWeights | None = None, dump_rollouts: bool = False) -> dict:
    init_ckpt = Path(init_ckpt)
    init_hash = verify_output(init_ckpt)
    parent = read_manifest(init_ckpt.parent)
    if parent.get("trace", "xcot") != "xcot":
        raise ValueError("GRPO needs a reasoning-trace checkpoint, not the direct baseline")
    model, _ = load_checkpoint(init_ckpt)
    out = _mkdir(out_dir)
    weights = weights or config.rewards
    train_grpo(model, config.grpo, weights, out_dir=out, dump_rollouts=dump_rollouts)
    outputs = ["final.xcf", "metrics.jsonl"] + (["rollouts.jsonl"] if dump_rollouts else [])
    return write_manifest(out, "train-grpo", config, {init_ckpt.name: init_hash}, outputs,
                          {"trace": "xcot", "reward_weights": {"w_f": weights.w_f, "w_i": weights.w_i,
                                                               "w_t": weights.w_t, "gating": weights.gating},
                           "train_combos": parent.get("train_combos")})


def checkpoint_policy(ckpt: str | Path) -> tuple[ModelPolicy, str]:
    """Load a manifest-verified checkpoint as an evaluable policy; returns it with its hash."""
    ckpt = Path(ckpt)
    digest = verify_output(ckpt)
    kind = read_manifest(ckpt.parent).get("trace", "xcot")
    model, _ = load_checkpoint(ckpt)
    model.eval()
    return ModelPolicy(model, trace_kind=kind), digest


def eval_stage(config: RunConfig, ckpt: str | Path, grammar_mask: bool = False,
               train_combos: list | None = None) -> EvalReport:
    policy, digest = checkpoint_policy(ckpt)
    if train_combos is None:
        train_combos = read_manifest(Path(ckpt).parent).get("train_combos")
    e = config.eval
    bench = build_bench(e.bench_seed, e.prompts_per_combo)
    return run_benchmark(policy, bench, e.temperature, e.samples_per_case, e.seed, grammar_mask,
                         train_combos=train_combos, weights=config.rewards,
                         metadata={"checkpoint_sha256": digest})
