"""Latent memory that training rows write to and every row reads from.

The write phase lets ``P`` learnable slots cross-attend to training rows only,
so the encoded memory is a function of the training set alone. The read phase
lets each row query the memory independently. Test rows therefore can never
influence the memory or the refined training rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .config import ModelConfig
from .errors import DimensionError, PreconditionError, StateError
from .tensor_core import FeedForward, LayerNorm, MultiHeadAttention, trunc_normal_param


class CrossAttnBlock(nn.Module):
    """Z = Q + MHCA(LN(Q), LN(KV)); out = Z + FFN(LN(Z))."""

    def __init__(self, d: int, n_heads: int, d_ff: int):
        super().__init__()
        self.ln_q = LayerNorm(d)
        self.ln_kv = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads)
        self.ln_z = LayerNorm(d)
        self.ffn = FeedForward(d, d_ff)

    def forward(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        if q.shape[-1] != kv.shape[-1]:
            raise DimensionError(f"query width {q.shape[-1]} != key/value width {kv.shape[-1]}")
        kv_n = self.ln_kv(kv)
        z = q + self.attn(self.ln_q(q), kv_n, kv_n)
        return z + self.ffn(self.ln_z(z))


@dataclass
class LatentMemory:
    state: Optional[torch.Tensor] = None  # (B, P, d_H)

    @property
    def encoded(self) -> bool:
        return self.state is not None


class PerceiverMemory(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.P = cfg.mem_slots
        d = cfg.d_r
        if self.P > 0:
            self.latents = trunc_normal_param(self.P, d)
            self.write_blocks = nn.ModuleList(CrossAttnBlock(d, cfg.mem_heads, 2 * d) for _ in range(cfg.mem_write))
            self.read_blocks = nn.ModuleList(CrossAttnBlock(d, cfg.mem_heads, 2 * d) for _ in range(cfg.mem_read))

    def write_memory(self, H_train: torch.Tensor) -> LatentMemory:
        """H_train: (B, n_train, d_H)."""
        if H_train.shape[-2] < 1:
            raise PreconditionError("memory write needs at least one training row")
        L = self.latents.expand(H_train.shape[0], -1, -1)
        for block in self.write_blocks:
            L = block(L, H_train)
        return LatentMemory(state=L)

    def read_memory(self, H_all: torch.Tensor, mem: LatentMemory) -> torch.Tensor:
        if mem is None or not mem.encoded:
            raise StateError("memory has not been written")
        R = H_all
        for block in self.read_blocks:
            R = block(R, mem.state)
        return R

    def refine(self, H: torch.Tensor, n_train: int, return_memory: bool = False):
        if not 1 <= n_train <= H.shape[-2]:
            raise PreconditionError(f"need 1 <= n_train <= {H.shape[-2]}, got {n_train}")
        if self.P == 0:
            return (H, None) if return_memory else H
        mem = self.write_memory(H[:, :n_train])
        R = self.read_memory(H, mem)
        return (R, mem) if return_memory else R

    def forward(self, H: torch.Tensor, n_train: int, return_memory: bool = False):
        return self.refine(H, n_train, return_memory)
