"""End-to-end model: column embedding -> row interaction -> memory -> ICL head."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .column_embedder import ColumnEmbedder
from .config import ModelConfig
from .errors import PreconditionError, SchemaError
from .icl_predictor import (
    ICLPredictor,
    LabelCodec,
    build_split_mask,
    normalize_labels,
    partition_classes,
    temperature_softmax,
)
from .perceiver_memory import PerceiverMemory
from .row_interaction import RowInteraction
from .tasks import TabularTask
from .tensor_core import DTYPE


class TabularICLModel(nn.Module):
    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.col = ColumnEmbedder(self.cfg)
        self.row = RowInteraction(self.cfg)
        self.memory = PerceiverMemory(self.cfg)
        self.icl = ICLPredictor(self.cfg)

    def forward(
        self,
        X: torch.Tensor,
        y_train: torch.Tensor,
        d_valid: Optional[torch.Tensor] = None,
        step: int = 0,
        trace: Optional[dict] = None,
    ) -> torch.Tensor:
        """X: (B, n, m) raw features, y_train: (B, n_train) class indices.

        Returns decoder logits for the test rows, (B, n - n_train, c_max).
        Pass a dict as ``trace`` to collect every intermediate stage.
        """
        if X.dim() == 2:
            X = X.unsqueeze(0)
        if y_train.dim() == 1:
            y_train = y_train.unsqueeze(0)
        n_train = y_train.shape[-1]
        emb = self.col(X.to(DTYPE), n_train, d_valid)
        rows = self.row(emb, step=step)
        R, mem = self.memory(rows.H, n_train, return_memory=True)
        R_inj = self.icl.inject_labels(R, y_train)
        H = self.icl.icl_forward(R_inj, build_split_mask(X.shape[1], n_train))
        logits = self.icl.decode(H[:, n_train:])
        if trace is not None:
            trace.update(
                E=emb.E, summaries=emb.summaries, H=rows.H, memory=None if mem is None else mem.state,
                R=R, R_injected=R_inj, H_icl=H, logits=logits, masks=rows.masks,
            )
        return logits

    # ------------------------------------------------------------------
    # inference on raw arrays

    @torch.no_grad()
    def _proba_idx(self, X_train: np.ndarray, y_idx: np.ndarray, X_test: np.ndarray, K: int) -> np.ndarray:
        if K > self.cfg.c_max:
            return self._hierarchical(X_train, y_idx, X_test, K)
        X = torch.as_tensor(np.concatenate([X_train, X_test]), dtype=DTYPE)[None]
        y = torch.as_tensor(y_idx, dtype=torch.long)[None]
        logits = self(X, y)
        return temperature_softmax(logits, K, self.cfg.temperature)[0].numpy()

    def _hierarchical(self, X_train, y_idx, X_test, K, n_groups: Optional[int] = None) -> np.ndarray:
        groups = partition_classes(K, self.cfg.c_max, n_groups)
        group_of = np.empty(K, dtype=np.int64)
        for g, members in enumerate(groups):
            group_of[members] = g
        p_group = self._proba_idx(X_train, group_of[y_idx], X_test, len(groups))
        out = np.zeros((len(X_test), K))
        for g, members in enumerate(groups):
            sel = np.isin(y_idx, members)
            local = np.searchsorted(np.asarray(members), y_idx[sel])
            p_intra = self._proba_idx(X_train[sel], local, X_test, len(members))
            out[:, members] = p_group[:, g : g + 1] * p_intra
        return out

    def hierarchical_predict(self, task: TabularTask, n_groups: Optional[int] = None) -> np.ndarray:
        """Group-then-class probabilities; callable for any K (n_groups=1 is the degenerate split)."""
        y = task.y_train.astype(np.int64)
        with torch.no_grad():
            return self._hierarchical(task.X_train, y, task.X_test, task.K, n_groups)

    def predict_proba(
        self, X_train, y_train: Sequence, X_test, query_mode: str = "batch"
    ) -> tuple[np.ndarray, LabelCodec]:
        """Zero-shot class probabilities for X_test, columns ordered as codec.classes.

        ``query_mode="single"`` runs each test row alone with the training set.
        """
        X_train = np.asarray(X_train, dtype=np.float64)
        X_test = np.asarray(X_test, dtype=np.float64)
        if X_train.ndim != 2 or X_test.ndim != 2 or X_train.shape[1] != X_test.shape[1]:
            raise SchemaError("train and test feature matrices must share their columns")
        if len(X_train) != len(y_train):
            raise PreconditionError("one label per training row required")
        codec = normalize_labels(y_train)
        y_idx = codec.encode(y_train)
        was_training = self.training
        self.eval()
        try:
            if query_mode == "batch":
                probs = self._proba_idx(X_train, y_idx, X_test, codec.K)
            elif query_mode == "single":
                probs = np.concatenate(
                    [self._proba_idx(X_train, y_idx, X_test[i : i + 1], codec.K) for i in range(len(X_test))]
                )
            else:
                raise ValueError(f"unknown query_mode {query_mode!r}")
        finally:
            self.train(was_training)
        return probs, codec

    def predict(self, X_train, y_train, X_test, query_mode: str = "batch") -> list:
        probs, codec = self.predict_proba(X_train, y_train, X_test, query_mode)
        # argmax takes the first maximum, i.e. the lowest class index on ties
        return codec.decode(probs.argmax(axis=1))


def query_mode_discrepancy(model: TabularICLModel, X_train, y_train, X_test) -> float:
    """Largest absolute probability gap between batch and single-row inference."""
    pb, _ = model.predict_proba(X_train, y_train, X_test, "batch")
    ps, _ = model.predict_proba(X_train, y_train, X_test, "single")
    return float(np.abs(pb - ps).max())


def collate(tasks: Sequence[TabularTask]):
    """Stack episodes sharing (n, n_train) into padded tensors.

    Returns X (B, n, m_max), y_train (B, n_train), y_test (B, n_test), d_valid (B,), K (B,).
    """
    n, n_train = tasks[0].n, tasks[0].n_train
    if any(t.n != n or t.n_train != n_train for t in tasks):
        raise PreconditionError("all episodes in a batch must share n and n_train")
    m_max = max(t.m for t in tasks)
    X = np.zeros((len(tasks), n, m_max))
    for b, t in enumerate(tasks):
        X[b, :, : t.m] = t.X
    y = np.stack([t.y for t in tasks]).astype(np.int64)
    return (
        torch.as_tensor(X, dtype=DTYPE),
        torch.as_tensor(y[:, :n_train]),
        torch.as_tensor(y[:, n_train:]),
        torch.as_tensor([t.m for t in tasks], dtype=torch.long),
        torch.as_tensor([t.K for t in tasks], dtype=torch.long),
    )
