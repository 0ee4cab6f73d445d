"""Column-wise cell embedding with a shared Set Transformer.

Each column is treated as a set of scalars. The values are projected to ``d``
dims, contextualised through stacked induced-set-attention blocks whose
inducing summaries are built from training rows only, and turned into a
per-cell affine map ``W * c + B``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from .config import ModelConfig
from .errors import DataError, DimensionError, PreconditionError
from .tensor_core import DTYPE, FeedForward, LayerNorm, MultiHeadAttention, trunc_normal_param, xavier_linear


def normalize_columns(X: torch.Tensor, n_train: int, d_valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Z-score every column with statistics from the first ``n_train`` rows.

    Constant columns, and padded columns past ``d_valid``, become all zeros.
    X has shape (B, n, m).
    """
    if not torch.isfinite(X).all():
        raise DataError("feature matrix contains non-finite values")
    train = X[:, :n_train]
    mu = train.mean(dim=1, keepdim=True)
    sd = train.std(dim=1, unbiased=False, keepdim=True)
    constant = sd <= 1e-12 * (1.0 + mu.abs())
    Z = torch.where(constant, torch.zeros_like(X), (X - mu) / torch.where(constant, torch.ones_like(sd), sd))
    if d_valid is not None:
        cols = torch.arange(X.shape[-1])
        Z = Z * (cols[None, None, :] < d_valid[:, None, None]).to(DTYPE)
    return Z


class MAB(nn.Module):
    """Multihead attention block with an FFN sublayer.

    Pre-norm: H = Q + MHA(LN(Q), LN(KV)); out = H + FFN(LN(H)).
    Post-norm: H = LN(Q + MHA(Q, KV)); out = LN(H + FFN(H)).
    """

    def __init__(self, d: int, n_heads: int, d_ff: int, prenorm: bool = True):
        super().__init__()
        self.prenorm = prenorm
        self.attn = MultiHeadAttention(d, n_heads)
        self.ln_q = LayerNorm(d)
        self.ln_kv = LayerNorm(d)
        self.ffn = FeedForward(d, d_ff)
        self.ln_h = LayerNorm(d)
        if not prenorm:
            del self.ln_kv

    def forward(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        if self.prenorm:
            kv_n = self.ln_kv(kv)
            h = q + self.attn(self.ln_q(q), kv_n, kv_n)
            return h + self.ffn(self.ln_h(h))
        h = self.ln_q(q + self.attn(q, kv, kv))
        return self.ln_h(h + self.ffn(h))


class ISAB(nn.Module):
    """Induced set attention whose inducing summary only sees training rows."""

    def __init__(self, d: int, k: int, n_heads: int, d_ff: int, prenorm: bool = True):
        super().__init__()
        self.inducing = trunc_normal_param(k, d)
        self.mab1 = MAB(d, n_heads, d_ff, prenorm)
        self.mab2 = MAB(d, n_heads, d_ff, prenorm)

    def summarize(self, U: torch.Tensor, n_train: int) -> torch.Tensor:
        I = self.inducing.expand(U.shape[0], -1, -1)
        return self.mab1(I, U[:, :n_train])

    def forward(self, U: torch.Tensor, n_train: int):
        M = self.summarize(U, n_train)
        return self.mab2(U, M), M


@dataclass
class EmbeddedTable:
    E: torch.Tensor  # (B, n, C + m, d)
    n_train: int
    m_valid: torch.Tensor  # (B,)
    summaries: list = field(default_factory=list)  # per ISAB block, (B, m, k, d)
    n_reserved: int = 0

    @property
    def m_max(self) -> int:
        return int(self.E.shape[2] - self.n_reserved)

    @property
    def features(self) -> torch.Tensor:
        return self.E[:, :, self.n_reserved :]


class ColumnEmbedder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d
        self.cfg = cfg
        self.proj = xavier_linear(1, d)
        self.blocks = nn.ModuleList(
            ISAB(d, cfg.col_inducing, cfg.col_heads, cfg.col_ff, cfg.col_prenorm) for _ in range(cfg.col_blocks)
        )
        self.generator = FeedForward(d, cfg.col_ff, 2 * d)
        self.skip = nn.Linear(1, d, dtype=DTYPE)
        nn.init.normal_(self.skip.weight, std=cfg.skip_init_std)
        nn.init.zeros_(self.skip.bias)

    def project_column(self, c: torch.Tensor) -> torch.Tensor:
        """Columns (..., n) -> (..., n, d) via c * w + b."""
        if c.shape[-1] == 0:
            raise DimensionError("empty column")
        return self.proj(c.unsqueeze(-1))

    def isab_forward(self, U: torch.Tensor, n_train: int, summaries: Optional[list] = None) -> torch.Tensor:
        if not 1 <= n_train <= U.shape[-2]:
            raise PreconditionError(f"need 1 <= n_train <= {U.shape[-2]}, got {n_train}")
        for block in self.blocks:
            U, M = block(U, n_train)
            if summaries is not None:
                summaries.append(M)
        return U

    def generate_affine(self, V: torch.Tensor):
        WB = self.generator(V)
        return WB[..., : self.cfg.d], WB[..., self.cfg.d :]

    def forward(self, X: torch.Tensor, n_train: int, d_valid: Optional[torch.Tensor] = None) -> EmbeddedTable:
        return self.embed_table(X, n_train, d_valid)

    def embed_table(self, X: torch.Tensor, n_train: int, d_valid: Optional[torch.Tensor] = None) -> EmbeddedTable:
        """X: (B, n, m) raw features -> E: (B, n, C + m, d)."""
        if X.dim() == 2:
            X = X.unsqueeze(0)
        B, n, m = X.shape
        if m < 1:
            raise DimensionError("table has no feature columns")
        if not 1 <= n_train <= n:
            raise PreconditionError(f"need 1 <= n_train <= {n}, got {n_train}")
        if d_valid is None:
            d_valid = torch.full((B,), m, dtype=torch.long)
        Z = normalize_columns(X.to(DTYPE), n_train, d_valid)
        cols = Z.transpose(1, 2).reshape(B * m, n)  # every column is one set
        U = self.project_column(cols)
        summaries: list = []
        V = self.isab_forward(U, n_train, summaries)
        W, Bias = self.generate_affine(V)
        feats = W * cols.unsqueeze(-1) + Bias
        feats = feats.reshape(B, m, n, self.cfg.d).transpose(1, 2)
        C = self.cfg.n_special
        reserved = self.skip(torch.zeros(B, n, C, 1, dtype=DTYPE))
        E = torch.cat([reserved, feats], dim=2)
        summaries = [M.reshape(B, m, *M.shape[1:]) for M in summaries]
        return EmbeddedTable(E=E, n_train=n_train, m_valid=d_valid, summaries=summaries, n_reserved=C)
