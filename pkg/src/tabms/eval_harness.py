"""Classification metrics and cross-dataset rank aggregation.

Prediction files are CSVs with a ``prediction`` column (extra ``p_*``
columns are ignored); truth files carry a ``label`` column. Files are paired
by name, and each model lives in its own sub-directory of the prediction root.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import CoverageError, PreconditionError, SchemaError


@dataclass(frozen=True)
class EvalRecord:
    dataset: str
    model: str
    accuracy: float
    weighted_f1: float

    def __post_init__(self):
        for name in ("accuracy", "weighted_f1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PreconditionError(f"{name}={v} outside [0, 1]")


def _pair(preds: Sequence, truth: Sequence) -> tuple[np.ndarray, np.ndarray]:
    p, t = np.asarray(list(preds), dtype=object), np.asarray(list(truth), dtype=object)
    if len(p) == 0:
        raise PreconditionError("metrics need at least one prediction")
    if len(p) != len(t):
        raise PreconditionError(f"{len(p)} predictions for {len(t)} labels")
    return p, t


def accuracy(preds: Sequence, truth: Sequence) -> float:
    p, t = _pair(preds, truth)
    return float(np.mean(p == t))


def weighted_f1(preds: Sequence, truth: Sequence) -> float:
    """Per-class F1 averaged with weights equal to each class's true support.

    A class that never occurs in ``truth`` has zero weight; a class with no
    true positives scores 0.
    """
    p, t = _pair(preds, truth)
    total = 0.0
    for c in dict.fromkeys(t.tolist()):
        tp = np.sum((p == c) & (t == c))
        fp = np.sum((p == c) & (t != c))
        fn = np.sum((p != c) & (t == c))
        f1 = 0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn)
        total += f1 * (tp + fn)
    return float(total / len(t))


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """Rank 1 for the highest score; tied scores share the mean of their positions."""
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(len(scores))
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def mean_rank(records: Iterable[EvalRecord], metric: str = "accuracy") -> dict[str, float]:
    """Per-dataset ranks of every model, averaged over datasets (lower is better)."""
    records = list(records)
    if not records:
        raise PreconditionError("no records to rank")
    models = sorted({r.model for r in records})
    datasets = sorted({r.dataset for r in records})
    table: dict[tuple[str, str], float] = {}
    for r in records:
        key = (r.dataset, r.model)
        if key in table:
            raise PreconditionError(f"duplicate record for model {r.model!r} on {r.dataset!r}")
        table[key] = getattr(r, metric)
    missing = [(d, m) for d in datasets for m in models if (d, m) not in table]
    if missing:
        raise CoverageError(f"{len(missing)} (dataset, model) pairs missing, e.g. {missing[0]}")
    totals = np.zeros(len(models))
    for d in datasets:
        totals += _average_ranks(np.array([table[(d, m)] for m in models]))
    return {m: float(v) for m, v in zip(models, totals / len(datasets))}


# ----------------------------------------------------------------------
# file-level harness


def _read_column(path: Path, column: str) -> list:
    df = pd.read_csv(path)
    if column not in df.columns:
        raise SchemaError(f"{path} has no {column!r} column")
    return df[column].tolist()


def _model_dirs(pred_root: Path) -> dict[str, Path]:
    subdirs = sorted(p for p in pred_root.iterdir() if p.is_dir())
    if subdirs:
        return {p.name: p for p in subdirs}
    return {pred_root.name: pred_root}


def evaluate_dirs(pred_root, truth_root) -> list[EvalRecord]:
    """Score every model directory against the truth files of the same names."""
    pred_root, truth_root = Path(pred_root), Path(truth_root)
    truths = {p.name: p for p in sorted(truth_root.glob("*.csv"))}
    if not truths:
        raise PreconditionError(f"no truth CSVs in {truth_root}")
    records = []
    for model, folder in _model_dirs(pred_root).items():
        preds = {p.name: p for p in sorted(folder.glob("*.csv"))}
        gaps = sorted(set(truths) ^ set(preds))
        if gaps:
            raise CoverageError(f"model {model!r}: unmatched files {gaps[:5]}")
        for name, tpath in truths.items():
            truth = _read_column(tpath, "label")
            cand = pd.read_csv(preds[name])
            col = "prediction" if "prediction" in cand.columns else "label"
            if col not in cand.columns:
                raise SchemaError(f"{preds[name]} has neither 'prediction' nor 'label'")
            # compare as strings so "1" and 1 from differently typed CSVs agree
            p = [str(v) for v in cand[col].tolist()]
            t = [str(v) for v in truth]
            records.append(EvalRecord(Path(name).stem, model, accuracy(p, t), weighted_f1(p, t)))
    return records


def summarize(records: Sequence[EvalRecord]) -> dict:
    ranks = mean_rank(records)
    models = sorted(ranks)
    return {
        "n_datasets": len({r.dataset for r in records}),
        "models": {
            m: {
                "accuracy": float(np.mean([r.accuracy for r in records if r.model == m])),
                "weighted_f1": float(np.mean([r.weighted_f1 for r in records if r.model == m])),
                "mean_rank": ranks[m],
            }
            for m in models
        },
    }


def write_report(records: Sequence[EvalRecord], out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame([asdict(r) for r in records], columns=["dataset", "model", "accuracy", "weighted_f1"])
    df.sort_values(["dataset", "model"]).to_csv(out / "results.csv", index=False)
    summary = summarize(records)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
