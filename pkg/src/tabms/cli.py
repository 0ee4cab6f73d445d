"""Command-line entry point: ``tabms <command> [options]``.

Commands: generate, pretrain, predict, inspect-mask, eval. Every command
accepts ``--config`` (JSON), ``--seed``, ``--out`` and repeated
``--set section.key=value`` overrides. On failure a JSON object
``{"error": ..., "message": ...}`` goes to stderr and the exit code is 2.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from . import eval_harness
from .config import ModelConfig, preset
from .errors import SchemaError
from .model import TabularICLModel
from .row_interaction import build_block_sparse_mask, render_mask
from .scm_datagen import ScmConfig, generate_episodes
from .tasks import load_archive, save_archive
from .trainer import CURRICULA, EpisodePool, StageConfig, SyntheticSource, load_checkpoint, pretrain

log = logging.getLogger("tabms")


class ConfigError(ValueError):
    pass


class ResourceError(RuntimeError):
    pass


# ----------------------------------------------------------------------
# run configuration


def default_run_config(model_preset: str = "desk", curriculum: str = "desk") -> dict:
    return {
        "model": preset(model_preset).to_dict(),
        "stages": [s.to_dict() for s in CURRICULA[curriculum]()],
        "data": {"episodes": 300, "n_samples": 768, "prior": "mix", "archive": None},
        "train": {"ckpt_every": 50, "max_memory_gb": None},
    }


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """``model.d=64``, ``stages.0.steps=10`` or ``data.prior=tree``; unknown keys are rejected."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node: Any = cfg
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            if not part.isdigit() or int(part) >= len(node):
                raise ConfigError(f"unknown config key {key!r}")
            part = int(part)
        elif not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {key!r}")
        if last:
            node[part] = _parse_value(raw)
        else:
            node = node[part]


def _merge(base: dict, update: dict, path: str = "") -> None:
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v


def build_run_config(args) -> dict:
    cfg = default_run_config(getattr(args, "preset", "desk") or "desk", getattr(args, "curriculum", "desk") or "desk")
    if args.config:
        _merge(cfg, json.loads(Path(args.config).read_text()))
    for assignment in args.set or []:
        apply_override(cfg, assignment)
    # validate eagerly so typos fail before any work starts
    try:
        ModelConfig.from_dict(dict(cfg["model"]))
        [StageConfig(**copy.deepcopy(s)) for s in cfg["stages"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _echo(cfg: dict, args) -> None:
    print(json.dumps({"command": args.command, "seed": args.seed, "config": cfg}, sort_keys=True))


# ----------------------------------------------------------------------
# memory estimate for the pretrain guard


def estimate_train_bytes(model_cfg: ModelConfig, stage: StageConfig) -> int:
    """Rough upper bound on live activation memory of one micro-batch (float64)."""
    B = stage.per_micro
    n = stage.sizes.hi if stage.sizes.kind != "fixed" else stage.sizes.lo
    m, C, d = 10, model_cfg.n_special, model_cfg.d
    col = B * m * n * d * model_cfg.col_blocks * 12
    row = 0
    for s in model_cfg.scales:
        L = C + -(-m // s)
        row += B * n * (L * d * 12 + model_cfg.row_heads * L * L * 3) * model_cfg.blocks_per_scale
    icl = B * model_cfg.icl_blocks * (n * model_cfg.d_r * 12 + model_cfg.icl_heads * n * n * 3 + n * model_cfg.icl_ff * 2)
    return int(8 * (col + row + icl))


def _system_memory_bytes() -> int:
    try:
        return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        return 8 << 30


# ----------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = build_run_config(args)
    data = cfg["data"]
    n = args.n if args.n is not None else data["episodes"]
    prior = args.prior or data["prior"]
    _echo(cfg, args)
    scm = ScmConfig(n_samples=args.n_samples or data["n_samples"])
    tasks = generate_episodes(scm, n, seed=args.seed, prior=prior)
    out = Path(args.out or "episodes")
    try:
        save_archive(tasks, out)
    except OSError as exc:
        raise OSError(f"cannot write episodes to {out}: {exc}") from exc
    balance = [np.bincount(t.y, minlength=t.K).min() / len(t.y) * t.K for t in tasks]
    summary = {
        "episodes": len(tasks),
        "out": str(out),
        "prior_counts": {p: sum(t.meta.get("prior") == p for t in tasks) for p in sorted({t.meta.get("prior") for t in tasks})},
        "classes": {str(k): sum(t.K == k for t in tasks) for k in sorted({t.K for t in tasks})},
        "mean_min_class_ratio": float(np.mean(balance)),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    cfg = build_run_config(args)
    out = Path(args.out or "run")
    model_cfg = ModelConfig.from_dict(dict(cfg["model"]))
    stages = [StageConfig(**copy.deepcopy(s)) for s in cfg["stages"]]
    limit_gb = cfg["train"]["max_memory_gb"]
    limit = int(limit_gb * (1 << 30)) if limit_gb else _system_memory_bytes() // 2
    need = max(estimate_train_bytes(model_cfg, s) for s in stages)
    if need > limit:
        raise ResourceError(f"estimated {need / 2**30:.1f} GiB of activations exceeds the {limit / 2**30:.1f} GiB limit")
    _echo(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps({"seed": args.seed, "config": cfg}, sort_keys=True, indent=2))
    data = cfg["data"]
    if data["archive"]:
        source = EpisodePool(load_archive(Path(data["archive"])))
    elif data["episodes"]:
        scm = ScmConfig(n_samples=data["n_samples"])
        source = EpisodePool(generate_episodes(scm, data["episodes"], seed=args.seed, prior=data["prior"]))
    else:
        source = SyntheticSource(ScmConfig(), prior=data["prior"])
    torch.manual_seed(args.seed)
    model = pretrain(
        TabularICLModel(model_cfg), stages, source, out,
        seed=args.seed, ckpt_every=cfg["train"]["ckpt_every"], resume=args.resume,
    )
    print(json.dumps({"checkpoint": str(out / "final"), "log": str(out / "train_log.jsonl"),
                      "parameters": sum(p.numel() for p in model.parameters())}))
    return 0


def _encode_features(train: pd.DataFrame, test: pd.DataFrame) -> tuple[np.ndarray, np.ndarray]:
    """Numeric columns pass through; anything else becomes ordinal codes over train+test."""
    Xtr, Xte = [], []
    for col in train.columns:
        a, b = train[col], test[col]
        if pd.api.types.is_numeric_dtype(a) and pd.api.types.is_numeric_dtype(b):
            Xtr.append(a.to_numpy(dtype=np.float64))
            Xte.append(b.to_numpy(dtype=np.float64))
        else:
            cats = pd.Categorical(pd.concat([a, b]).astype(str))
            codes = cats.codes.astype(np.float64)
            Xtr.append(codes[: len(a)])
            Xte.append(codes[len(a) :])
    return np.stack(Xtr, axis=1), np.stack(Xte, axis=1)


def predict_frames(model, train: pd.DataFrame, test: pd.DataFrame, label_column: str) -> pd.DataFrame:
    if label_column not in train.columns:
        raise SchemaError(f"train table has no label column {label_column!r}")
    features = [c for c in train.columns if c != label_column]
    if not features:
        raise SchemaError("train table has no feature columns")
    test_features = [c for c in test.columns if c != label_column]
    if sorted(test_features) != sorted(features):
        missing = sorted(set(features) - set(test_features))
        extra = sorted(set(test_features) - set(features))
        raise SchemaError(f"test columns differ from train: missing {missing}, unexpected {extra}")
    if train[features].isna().any().any() or test[features].isna().any().any():
        raise SchemaError("missing values in feature columns")
    Xtr, Xte = _encode_features(train[features], test[features])
    probs, codec = model.predict_proba(Xtr, train[label_column].tolist(), Xte)
    out = pd.DataFrame({"prediction": codec.decode(probs.argmax(axis=1))})
    for k, label in enumerate(codec.classes):
        out[f"p_{label}"] = probs[:, k]
    return out


def cmd_predict(args) -> int:
    torch.manual_seed(args.seed)
    model = load_checkpoint(Path(args.checkpoint))
    if args.set:
        overrides = {"model": model.cfg.to_dict()}
        for assignment in args.set:
            apply_override(overrides, assignment)
        tuned = TabularICLModel(ModelConfig.from_dict(overrides["model"]))
        tuned.load_state_dict(model.state_dict())
        model = tuned
    _echo({"model": model.cfg.to_dict(), "checkpoint": args.checkpoint}, args)
    train = pd.read_csv(args.train_csv, float_precision="round_trip")
    test = pd.read_csv(args.test_csv, float_precision="round_trip")
    preds = predict_frames(model, train, test, args.label_column)
    out = Path(args.out or "predictions.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    preds.to_csv(out, index=False, float_format="%.17g")
    print(json.dumps({"predictions": str(out), "rows": len(preds), "classes": len(preds.columns) - 1}))
    return 0


def cmd_inspect_mask(args) -> int:
    rng = np.random.default_rng(args.seed)
    mask = build_block_sparse_mask(args.L, args.n_special, args.window, args.random_links, rng)
    grid = render_mask(mask)
    if args.out:
        Path(args.out).write_text(grid + "\n")
    print(grid)
    return 0


def cmd_eval(args) -> int:
    records = eval_harness.evaluate_dirs(args.pred_dir, args.truth_dir)
    out = Path(args.out or "eval_report")
    summary = eval_harness.write_report(records, out)
    print(json.dumps(summary, sort_keys=True))
    return 0


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON run configuration")
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--out", help="output path")
    shared.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    shared.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="tabms", description="Tabular in-context learning toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", aliases=["generate-data"], parents=[shared], help="write synthetic SCM episodes")
    g.add_argument("--n", type=int, help="number of episodes")
    g.add_argument("--prior", choices=["mix", "mlp", "tree"])
    g.add_argument("--n-samples", type=int, help="rows per episode")
    g.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", parents=[shared], help="run the staged curriculum")
    p.add_argument("--preset", choices=["desk", "micro", "full"], default="desk")
    p.add_argument("--curriculum", choices=sorted(CURRICULA), default="desk")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoints in --out")
    p.set_defaults(func=cmd_pretrain)

    q = sub.add_parser("predict", parents=[shared], help="zero-shot predictions for a CSV table")
    q.add_argument("checkpoint")
    q.add_argument("train_csv")
    q.add_argument("test_csv")
    q.add_argument("label_column")
    q.set_defaults(func=cmd_predict)

    m = sub.add_parser("inspect-mask", parents=[shared], help="print a sparse attention mask")
    m.add_argument("L", type=int)
    m.add_argument("n_special", type=int)
    m.add_argument("-w", "--window", type=int, default=8)
    m.add_argument("-r", "--random-links", type=int, default=0)
    m.set_defaults(func=cmd_inspect_mask)

    e = sub.add_parser("eval", parents=[shared], help="score prediction CSVs against truth")
    e.add_argument("pred_dir")
    e.add_argument("truth_dir")
    e.set_defaults(func=cmd_eval)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # reported as JSON for callers that parse stderr
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
