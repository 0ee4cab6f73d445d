"""Dataset-wise in-context prediction.

Training rows get a label embedding added, then a pre-norm transformer runs
under a split mask (training rows cannot see test rows) and a GELU MLP decodes
test rows into class logits. Also holds the label codec, the temperature
softmax, the class partition used for hierarchical prediction and the loss.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .errors import DataError, DimensionError, PartitionError, PreconditionError
from .tensor_core import DTYPE, FeedForward, LayerNorm, PreNormBlock, softmax_masked, xavier_linear

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LabelCodec:
    """Sorted unique labels; position in ``classes`` is the normalized index."""

    classes: tuple

    @property
    def K(self) -> int:
        return len(self.classes)

    def encode(self, labels: Sequence) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([lookup[_key(v)] for v in labels], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"label {exc.args[0]!r} not seen in the training labels") from None

    def decode(self, idx: Sequence[int]) -> list:
        return [self.classes[int(i)] for i in idx]


def _key(v):
    # numpy scalars hash like their Python counterparts but keep them uniform
    return v.item() if isinstance(v, np.generic) else v


def normalize_labels(y_train: Sequence) -> LabelCodec:
    values = [_key(v) for v in y_train]
    if not values:
        raise PreconditionError("no training labels")
    return LabelCodec(tuple(sorted(set(values))))


@dataclass(frozen=True)
class SplitMask:
    n: int
    n_train: int

    def dense(self) -> torch.Tensor:
        return build_split_mask(self.n, self.n_train)


def build_split_mask(n: int, n_train: int) -> torch.Tensor:
    """Additive (n, n) mask: only train-row queries on test-row keys are blocked."""
    if not 1 <= n_train < n:
        raise PreconditionError(f"need 1 <= n_train < n, got n_train={n_train}, n={n}")
    M = torch.zeros(n, n, dtype=DTYPE)
    M[:n_train, n_train:] = float("-inf")
    return M


def partition_classes(K: int, c_max: int, n_groups: Optional[int] = None) -> list[list[int]]:
    """Contiguous, size-balanced chunks of range(K); G = ceil(K / c_max) by default."""
    G = -(-K // c_max) if n_groups is None else n_groups
    if G < 1 or G > K:
        raise PartitionError(f"cannot split {K} classes into {G} groups")
    groups = [g.tolist() for g in np.array_split(np.arange(K), G)]
    if max(len(g) for g in groups) > c_max:
        raise PartitionError(f"a group holds more than {c_max} classes")
    return groups


def temperature_softmax(logits: torch.Tensor, K: int, tau: float) -> torch.Tensor:
    return softmax_masked(logits[..., :K] / tau)


def icl_loss(probs: torch.Tensor, y_test: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the true classes over every test position."""
    p = probs.gather(-1, y_test.long().unsqueeze(-1)).squeeze(-1)
    if bool((p < PROB_FLOOR).any()):
        warnings.warn("true-class probability below 1e-12; clamping", RuntimeWarning, stacklevel=2)
        p = p.clamp_min(PROB_FLOOR)
    return -torch.log(p).mean()


def icl_loss_from_logits(logits: torch.Tensor, y_test: torch.Tensor, K: torch.Tensor, tau: float) -> torch.Tensor:
    """Same loss computed stably from decoder logits (B, n_test, C_max).

    Classes at or beyond each dataset's K are excluded from the softmax.
    """
    C = logits.shape[-1]
    inactive = torch.arange(C)[None, :] >= K[:, None]
    z = logits / tau + torch.where(inactive, float("-inf"), 0.0).to(DTYPE)[:, None, :]
    logp = torch.log_softmax(z, dim=-1)
    return -logp.gather(-1, y_test.long().unsqueeze(-1)).mean()


class ICLPredictor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_r
        self.label_proj = xavier_linear(cfg.c_max, d, bias=False)  # W_y, applied to one-hot rows
        if cfg.label_init_std is not None:
            # embedding-table scale, comparable to the unit-variance row vectors it is added to
            nn.init.normal_(self.label_proj.weight, std=cfg.label_init_std)
        self.blocks = nn.ModuleList(PreNormBlock(d, cfg.icl_heads, cfg.icl_ff) for _ in range(cfg.icl_blocks))
        self.out_norm = LayerNorm(d)
        self.decoder = FeedForward(d, 2 * d, cfg.c_max)

    @property
    def W_y(self) -> torch.Tensor:
        return self.label_proj.weight.T  # (c_max, d_R)

    def inject_labels(self, R: torch.Tensor, y_train: torch.Tensor) -> torch.Tensor:
        """Add OneHot(y) W_y to the first len(y) rows; later rows pass through untouched."""
        n_train = y_train.shape[-1]
        if n_train > R.shape[-2]:
            raise DimensionError("more labels than rows")
        if bool((y_train < 0).any()) or bool((y_train >= self.cfg.c_max).any()):
            raise DataError(f"label index outside [0, {self.cfg.c_max})")
        onehot = nn.functional.one_hot(y_train.long(), self.cfg.c_max).to(DTYPE)
        train = R[..., :n_train, :] + self.label_proj(onehot)
        return torch.cat([train, R[..., n_train:, :]], dim=-2)

    def icl_forward(self, R: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if mask.shape[-1] != R.shape[-2]:
            raise DimensionError("split mask does not match the number of rows")
        H = R
        for block in self.blocks:
            H = block(H, mask)
        return self.out_norm(H)

    def decode(self, H_test: torch.Tensor) -> torch.Tensor:
        return self.decoder(H_test)

    def forward(self, R: torch.Tensor, y_train: torch.Tensor) -> torch.Tensor:
        """R: (B, n, d_R), y_train: (B, n_train) normalized -> logits (B, n_test, c_max)."""
        n, n_train = R.shape[-2], y_train.shape[-1]
        R = self.inject_labels(R, y_train)
        H = self.icl_forward(R, build_split_mask(n, n_train))
        return self.decode(H[..., n_train:, :])

    def predict(self, logits: torch.Tensor, K: int, tau: Optional[float] = None) -> torch.Tensor:
        if K > self.cfg.c_max:
            raise PartitionError(f"K={K} exceeds c_max={self.cfg.c_max}; use hierarchical prediction")
        return temperature_softmax(logits, K, self.cfg.temperature if tau is None else tau)
