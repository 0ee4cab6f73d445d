"""Multi-scale block-sparse row interaction.

Per scale ``s`` the feature tokens of each row are soft-pooled into
``ceil(m / s)`` groups, special CLS/GLOBAL tokens are prepended, and a small
pre-norm transformer with rotary positions runs under a window + global +
random-link mask. CLS outputs are averaged over scales, flattened and
layer-normalised into one vector per row. Rows never attend to each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .column_embedder import EmbeddedTable
from .config import ModelConfig
from .errors import DimensionError, PreconditionError
from .tensor_core import DTYPE, LayerNorm, PreNormBlock, softmax_masked, trunc_normal_param, xavier_linear


@dataclass
class SparseMask:
    """Additive attention mask over ``L`` tokens, first ``n_special`` fully connected.

    ``links`` holds the sampled random (query, key) pairs, 0-based.
    """

    L: int
    n_special: int
    window: int
    random_links: int = 0
    links: list = field(default_factory=list)
    seed: Optional[int] = None

    def allowed(self) -> np.ndarray:
        idx = np.arange(self.L)
        ok = np.abs(idx[:, None] - idx[None, :]) <= self.window
        ok[: self.n_special, :] = True
        ok[:, : self.n_special] = True
        for i, j in self.links:
            ok[i, j] = True
        np.fill_diagonal(ok, True)
        return ok

    def dense(self) -> torch.Tensor:
        ok = torch.from_numpy(self.allowed())
        return torch.where(ok, torch.zeros((), dtype=DTYPE), torch.full((), float("-inf"), dtype=DTYPE))

    def index_lists(self) -> list[np.ndarray]:
        """CSR-style view: allowed key indices for every query row."""
        ok = self.allowed()
        return [np.flatnonzero(row) for row in ok]


def build_block_sparse_mask(
    L: int, n_special: int, window: int, random_links: int = 0, rng: Optional[np.random.Generator] = None
) -> SparseMask:
    if L < 1 or n_special < 0 or n_special > L or window < 0:
        raise PreconditionError(f"invalid mask geometry L={L}, n_special={n_special}, w={window}")
    n_feat = L - n_special
    if random_links < 0 or random_links > max(n_feat - 1, 0):
        raise PreconditionError(f"random_links={random_links} exceeds the {max(n_feat - 1, 0)} other feature tokens")
    links = []
    if random_links and n_feat > 1:
        rng = np.random.default_rng() if rng is None else rng
        for i in range(n_special, L):
            pool = np.array([j for j in range(n_special, L) if j != i])
            for j in rng.choice(pool, size=random_links, replace=False):
                links.append((i, int(j)))
    return SparseMask(L=L, n_special=n_special, window=window, random_links=random_links, links=links)


def count_allowed(mask: SparseMask) -> int:
    return int(mask.allowed().sum())


def render_mask(mask: SparseMask, on: str = "#", off: str = ".") -> str:
    """One text line per query row; ``on`` where attention is allowed."""
    return "\n".join("".join(on if v else off for v in row) for row in mask.allowed())


def sinusoidal_pe(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=DTYPE)[:, None]
    i = torch.arange(0, d, 2, dtype=DTYPE)
    angle = pos / (10000.0 ** (i / d))
    pe = torch.zeros(n, d, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe


class PMAGrouping(nn.Module):
    """Soft-pool m feature tokens into K groups: softmax(Q K^T / sqrt(d)) V.

    Queries are a learnable seed plus sinusoidal position codes, so the same
    parameters serve any group count.
    """

    def __init__(self, d: int, key_pe: bool = True):
        super().__init__()
        self.d = d
        self.key_pe = key_pe
        self.seed = trunc_normal_param(1, d)
        self.lin_k = xavier_linear(d, d)
        self.lin_v = xavier_linear(d, d)

    def queries(self, K: int) -> torch.Tensor:
        return self.seed + sinusoidal_pe(K, self.d)

    def forward(self, feats: torch.Tensor, K: int, d_valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        """feats: (B, n, m, d) -> (B, n, K, d)."""
        if feats.shape[-2] == 0:
            raise DimensionError("no feature tokens to group")
        if K < 1:
            raise PreconditionError("group count must be positive")
        B, n, m, d = feats.shape
        keys = self.lin_k(feats + sinusoidal_pe(m, d) if self.key_pe else feats)
        vals = self.lin_v(feats)
        scores = torch.matmul(self.queries(K), keys.transpose(-2, -1)) / math.sqrt(d)  # (B, n, K, m)
        mask = None
        if d_valid is not None and bool((d_valid < m).any()):
            valid = torch.arange(m)[None, :] < d_valid[:, None]
            mask = torch.where(valid, 0.0, float("-inf")).to(DTYPE)[:, None, None, :]
        return torch.matmul(softmax_masked(scores, mask), vals)


class ScaleEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            PreNormBlock(cfg.d, cfg.row_heads, cfg.row_ff, rope_theta=cfg.rope_theta)
            for _ in range(cfg.blocks_per_scale)
        )

    def forward(self, X: torch.Tensor, mask: SparseMask, key_pad: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``key_pad`` (B, L) marks padding tokens: no other token may attend to them."""
        if X.shape[-2] != mask.L:
            raise DimensionError(f"sequence length {X.shape[-2]} does not match mask size {mask.L}")
        M = mask.dense()
        if key_pad is not None:
            eye = torch.eye(mask.L, dtype=torch.bool)
            blocked = key_pad[:, None, None, :] & ~eye  # (B, 1, L, L); heads broadcast below
            M = M + torch.where(blocked, float("-inf"), 0.0).to(DTYPE)[:, :, None]
        for block in self.blocks:
            X = block(X, M)
        return X


@dataclass
class RowEmbeddings:
    H: torch.Tensor  # (B, n, n_cls * d)
    masks: list = field(default_factory=list)
    per_scale: list = field(default_factory=list)  # CLS blocks per scale, (B, n, n_cls, d)


class RowInteraction(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        S = len(cfg.scales)
        self.pma = nn.ModuleList(PMAGrouping(cfg.d, cfg.pma_key_pe) for _ in range(S))
        self.cls = nn.ParameterList(trunc_normal_param(cfg.n_cls, cfg.d) for _ in range(S))
        self.glob = nn.ParameterList(trunc_normal_param(cfg.n_global, cfg.d) for _ in range(S))
        self.encoders = nn.ModuleList(ScaleEncoder(cfg) for _ in range(S))
        self.out_norm = LayerNorm(cfg.d_r)

    def scale_mask(self, si: int, L: int, step: int) -> SparseMask:
        cfg = self.cfg
        r = min(cfg.random_links, max(L - cfg.n_special - 1, 0))
        rng = np.random.default_rng([cfg.mask_seed, step, si])
        mask = build_block_sparse_mask(L, cfg.n_special, cfg.window, r, rng)
        mask.seed = cfg.mask_seed
        return mask

    def forward(self, emb: EmbeddedTable, step: int = 0) -> RowEmbeddings:
        return self.row_interact(emb, step)

    def row_interact(self, emb: EmbeddedTable, step: int = 0) -> RowEmbeddings:
        cfg = self.cfg
        C = cfg.n_special
        E = emb.E
        B, n, total, d = E.shape
        m = total - C
        reserved, feats = E[:, :, :C], E[:, :, C:]
        d_valid = emb.m_valid
        out = RowEmbeddings(H=None)
        for si, s in enumerate(cfg.scales):
            K = -(-m // s)
            if s == 1 and cfg.scale1_identity:
                G = feats
            else:
                G = self.pma[si](feats, K, d_valid)
            special = torch.cat([self.cls[si], self.glob[si]], dim=0) + reserved
            X = torch.cat([special, G], dim=2)
            mask = self.scale_mask(si, C + K, step)
            key_pad = None
            if d_valid is not None and bool((d_valid < m).any()):
                k_valid = -(-d_valid // s)
                pad = torch.arange(K)[None, :] >= k_valid[:, None]
                key_pad = torch.cat([torch.zeros(B, C, dtype=torch.bool), pad], dim=1)
            Z = self.encoders[si](X, mask, key_pad)
            out.masks.append(mask)
            out.per_scale.append(Z[:, :, : cfg.n_cls])
        agg = torch.stack(out.per_scale, dim=0).mean(dim=0)
        out.H = self.out_norm(agg.flatten(-2))
        return out
