"""Dense tensor primitives with reverse-mode autodiff.

All math runs on torch tensors in float64; torch's autograd tape records the
forward pass and ``backward`` replays it in reverse. The functions here are the
neural building blocks every other module composes, written out explicitly
(no fused SDPA kernels) so attention supports stay exact and auditable.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn

from .errors import DimensionError, PreconditionError, StateError

DTYPE = torch.float64
NEG_INF = float("-inf")


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite values produced in {where}")
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1:
        raise DimensionError("matmul needs tensors of rank >= 1")
    if a.shape[-1] != (b.shape[-2] if b.dim() > 1 else b.shape[0]):
        raise DimensionError(f"inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    try:
        return torch.matmul(a, b)
    except RuntimeError as exc:  # non-broadcastable batch extents
        raise DimensionError(str(exc)) from exc


def softmax_masked(logits: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Softmax over the last axis with an additive {0, -inf} mask.

    Masked positions come out exactly 0. A row with no allowed entry is an
    error rather than a silent NaN.
    """
    if mask is not None:
        if not torch.all((mask == 0) | torch.isneginf(mask)):
            raise PreconditionError("mask entries must be 0 or -inf")
        if torch.isneginf(mask).all(dim=-1).any():
            raise PreconditionError("mask has a fully blocked row")
        logits = logits + mask
    shift = logits.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(logits - shift)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty axis")
    if gamma.shape[-1] != d or beta.shape[-1] != d:
        raise DimensionError(f"affine params of size {gamma.shape[-1]} for axis of size {d}")
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    return xc / torch.sqrt(var + eps) * gamma + beta


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact erf form
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def rope_apply(x: torch.Tensor, theta: float = 100000.0, positions: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Rotate consecutive coordinate pairs (2i, 2i+1) by angle pos * theta**(-2i/d_k)."""
    d_k = x.shape[-1]
    if d_k % 2:
        raise DimensionError(f"rotary embedding needs an even head dim, got {d_k}")
    L = x.shape[-2]
    if positions is None:
        positions = torch.arange(L, dtype=DTYPE)
    freqs = theta ** (-torch.arange(0, d_k, 2, dtype=DTYPE) / d_k)
    angles = positions.to(DTYPE)[:, None] * freqs[None, :]
    cos, sin = torch.cos(angles), torch.sin(angles)
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out_even = x_even * cos - x_odd * sin
    out_odd = x_even * sin + x_odd * cos
    return torch.stack((out_even, out_odd), dim=-1).flatten(-2)


def scaled_dot_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    return_weights: bool = False,
):
    scores = matmul(q, k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    weights = softmax_masked(scores, mask)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def dropout(x: torch.Tensor, p: float = 0.0, training: bool = False) -> torch.Tensor:
    # every configured rate is 0.0; the hook stays for ablations
    if p == 0.0 or not training:
        return x
    return nn.functional.dropout(x, p=p, training=True)


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise DimensionError("backward needs a scalar loss")
    if loss.grad_fn is None and not loss.requires_grad:
        raise StateError("no recorded forward pass leads to this loss")
    loss.backward()


# ---------------------------------------------------------------------------
# Parameterised layers


def xavier_linear(d_in: int, d_out: int, bias: bool = True) -> nn.Linear:
    lin = nn.Linear(d_in, d_out, bias=bias, dtype=DTYPE)
    nn.init.xavier_uniform_(lin.weight)
    if bias:
        nn.init.zeros_(lin.bias)
    return lin


def trunc_normal_param(*shape: int, std: float = 0.02) -> nn.Parameter:
    p = torch.empty(*shape, dtype=DTYPE)
    nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std)
    return nn.Parameter(p)


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        if d < 1:
            raise DimensionError("layer_norm over an empty axis")
        self.gamma = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.beta = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(nn.Module):
    """Two-layer GELU MLP."""

    def __init__(self, d: int, d_hidden: int, d_out: Optional[int] = None):
        super().__init__()
        self.fc1 = xavier_linear(d, d_hidden)
        self.fc2 = xavier_linear(d_hidden, d if d_out is None else d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(gelu(self.fc1(x)))


class MultiHeadAttention(nn.Module):
    """Concat(head_1..head_h) W_O with per-head scaled dot-product attention.

    ``rope_theta`` rotates queries and keys by sequence position before the
    dot product; leave it ``None`` for set-style attention.
    """

    def __init__(self, d: int, n_heads: int, d_kv: Optional[int] = None, rope_theta: Optional[float] = None):
        super().__init__()
        if d % n_heads:
            raise DimensionError(f"model dim {d} not divisible by {n_heads} heads")
        d_kv = d if d_kv is None else d_kv
        self.d, self.n_heads, self.d_head = d, n_heads, d // n_heads
        if rope_theta is not None and self.d_head % 2:
            raise DimensionError(f"rotary embedding needs an even head dim, got {self.d_head}")
        self.rope_theta = rope_theta
        self.w_q = xavier_linear(d, d)
        self.w_k = xavier_linear(d_kv, d)
        self.w_v = xavier_linear(d_kv, d)
        self.w_o = xavier_linear(d, d)
        self.last_weights: Optional[torch.Tensor] = None
        self.keep_weights = False

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        return x.unflatten(-1, (self.n_heads, self.d_head)).transpose(-3, -2)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: Optional[torch.Tensor] = None):
        if q.shape[-1] != self.d or k.shape[-1] != self.w_k.in_features:
            raise DimensionError("query/key widths do not match the attention layer")
        qh, kh, vh = self._split(self.w_q(q)), self._split(self.w_k(k)), self._split(self.w_v(v))
        if self.rope_theta is not None:
            qh = rope_apply(qh, self.rope_theta)
            kh = rope_apply(kh, self.rope_theta)
        out, w = scaled_dot_attention(qh, kh, vh, mask, return_weights=True)
        if self.keep_weights:
            self.last_weights = w.detach()
        return self.w_o(out.transpose(-3, -2).flatten(-2))


def multi_head_attention(q, k, v, mask, h: int, w_q, w_k, w_v, w_o) -> torch.Tensor:
    """Functional form of :class:`MultiHeadAttention` on bare weight matrices (x @ W)."""
    d = w_q.shape[-1]
    if d % h:
        raise DimensionError(f"model dim {d} not divisible by {h} heads")
    dh = d // h

    def split(x):
        return x.unflatten(-1, (h, dh)).transpose(-3, -2)

    out = scaled_dot_attention(split(matmul(q, w_q)), split(matmul(k, w_k)), split(matmul(v, w_v)), mask)
    return matmul(out.transpose(-3, -2).flatten(-2), w_o)


class PreNormBlock(nn.Module):
    """x + MHA(LN(x)) followed by x + FFN(LN(x))."""

    def __init__(self, d: int, n_heads: int, d_ff: int, rope_theta: Optional[float] = None):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rope_theta=rope_theta)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, d_ff)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, h, mask)
        return x + self.ffn(self.ln2(x))
