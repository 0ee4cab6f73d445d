"""Classification episodes and their on-disk archive format.

An archive is one directory per episode holding ``X.csv`` (header f0..f{m-1}),
``y.csv`` (header ``y``) and ``meta.json`` (prior, seed, K, n_train, ...).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd


@dataclass
class TabularTask:
    X: np.ndarray  # (n, m)
    y: np.ndarray  # (n,) ints in [0, K)
    n_train: int
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return int(self.meta.get("K", int(self.y.max()) + 1))

    @property
    def X_train(self) -> np.ndarray:
        return self.X[: self.n_train]

    @property
    def X_test(self) -> np.ndarray:
        return self.X[self.n_train :]

    @property
    def y_train(self) -> np.ndarray:
        return self.y[: self.n_train]

    @property
    def y_test(self) -> np.ndarray:
        return self.y[self.n_train :]

    def subset(self, rows: np.ndarray, n_train: int) -> "TabularTask":
        return TabularTask(self.X[rows], self.y[rows], n_train, dict(self.meta))


def save_task(task: TabularTask, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cols = [f"f{j}" for j in range(task.m)]
    pd.DataFrame(task.X, columns=cols).to_csv(directory / "X.csv", index=False, float_format="%.17g")
    pd.DataFrame({"y": task.y.astype(np.int64)}).to_csv(directory / "y.csv", index=False)
    meta = dict(task.meta)
    meta["n_train"] = int(task.n_train)
    meta.setdefault("K", task.K)
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2))


def load_task(directory: Path) -> TabularTask:
    directory = Path(directory)
    X = pd.read_csv(directory / "X.csv", float_precision="round_trip").to_numpy(dtype=np.float64)
    y = pd.read_csv(directory / "y.csv")["y"].to_numpy(dtype=np.int64)
    meta = json.loads((directory / "meta.json").read_text())
    return TabularTask(X, y, int(meta["n_train"]), meta)


def save_archive(tasks: Iterable[TabularTask], root: Path) -> list[Path]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, task in enumerate(tasks):
        p = root / f"episode_{i:05d}"
        save_task(task, p)
        paths.append(p)
    return paths


def load_archive(root: Path) -> list[TabularTask]:
    root = Path(root)
    return [load_task(p) for p in sorted(root.iterdir()) if (p / "meta.json").exists()]
