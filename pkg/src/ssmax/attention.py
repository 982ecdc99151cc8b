"""Causal multi-head attention with rotary embeddings and pluggable score
normalization.

Every normalization mode is implemented by multiplying each query row by a
per-head, per-row factor before the usual scaled dot product:

    softmax          1
    ssmax            s * ln n
    ssmax_no_scale   ln n
    ssmax_bias       s * ln n + b
    pn_probe         s * p[n - 1] + b

where ``n`` is the number of keys visible to that row (its 1-based position
under the causal mask). Multiplying the query is the same as multiplying the
logits, so the fused ``scaled_dot_product_attention`` kernel can be used
unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ssmax import kernels

MODES = ("softmax", "ssmax", "ssmax_no_scale", "ssmax_bias", "pn_probe")
MODES_WITH_S = ("ssmax", "ssmax_bias", "pn_probe")
MODES_WITH_B = ("ssmax_bias", "pn_probe")


class AttentionConfigError(ValueError):
    pass


class AttentionDomainError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    head_dim: int
    num_heads: int
    mode: str = "softmax"
    rope_theta: float = 10000.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise AttentionConfigError(f"unknown attention mode {self.mode!r}")
        if self.head_dim <= 0 or self.num_heads <= 0:
            raise AttentionConfigError("head_dim and num_heads must be positive")
        if self.head_dim % 2:
            raise AttentionConfigError(f"rotary embeddings need an even head_dim, got {self.head_dim}")
        if not self.rope_theta > 0:
            raise AttentionConfigError(f"rope_theta must be positive, got {self.rope_theta}")

    @property
    def hidden_size(self) -> int:
        return self.head_dim * self.num_heads


# -- rotary embeddings ---------------------------------------------------------


def rope_frequencies(head_dim: int, theta: float) -> np.ndarray:
    if head_dim % 2:
        raise AttentionConfigError(f"rotary embeddings need an even head_dim, got {head_dim}")
    return theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)


def rope_apply(x, position: int, theta: float) -> np.ndarray:
    """Rotate adjacent pairs ``(x[2k], x[2k+1])`` by ``position * theta**(-2k/d)``."""
    x = np.asarray(x, dtype=np.float64)
    if position < 0:
        raise AttentionDomainError("position must be non-negative")
    angles = position * rope_frequencies(x.shape[-1], theta)
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_tables(positions: torch.Tensor, head_dim: int, theta: float, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    freqs = torch.from_numpy(rope_frequencies(head_dim, theta))
    angles = positions.to(torch.float64)[:, None] * freqs[None, :]
    return angles.cos().to(dtype), angles.sin().to(dtype)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Batched rotary embedding; ``x`` is ``(..., T, d)`` and the tables ``(T, d/2)``."""
    even, odd = x[..., 0::2], x[..., 1::2]
    return torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1).flatten(-2)


# -- per-row score scaling -----------------------------------------------------


def row_scale(mode: str, seq_len: int, s=None, b=None, pn=None, dtype=torch.float32, device=None):
    """Factor multiplying each query row, shape ``(num_heads, seq_len)``.

    Returns ``None`` for plain softmax. ``s`` and ``b`` are per-head tensors;
    ``pn`` is the shared per-length table.
    """
    if mode == "softmax":
        return None
    n = torch.arange(1, seq_len + 1, dtype=dtype, device=device)
    if mode == "ssmax_no_scale":
        return torch.log(n)[None, :]
    if mode == "ssmax":
        return s[:, None] * torch.log(n)[None, :]
    if mode == "ssmax_bias":
        return s[:, None] * torch.log(n)[None, :] + b[:, None]
    if mode == "pn_probe":
        if seq_len > pn.shape[0]:
            raise kernels.KernelRangeError(f"sequence length {seq_len} exceeds p_n table length {pn.shape[0]}")
        return s[:, None] * pn[None, :seq_len] + b[:, None]
    raise AttentionConfigError(f"unknown attention mode {mode!r}")


def attention_scores(q_n, keys, mode: str = "softmax", s: float = 1.0, b: float = 0.0, pn=None) -> np.ndarray:
    """Attention distribution of one query over its visible prefix of keys.

    The row's ``n`` is ``len(keys)``. The scale factor multiplies the query
    before the dot product, as in the batched path.
    """
    q_n = np.asarray(q_n, dtype=np.float64)
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    if keys.shape[1] != q_n.shape[0]:
        raise AttentionDomainError(f"key width {keys.shape[1]} does not match query width {q_n.shape[0]}")
    n, d = keys.shape
    if mode == "ssmax_no_scale":
        factor = math.log(n)
    elif mode == "pn_probe":
        factor = kernels.scale_factor(n, "softmax_pn", s, b, pn)
    elif mode in MODES:
        factor = kernels.scale_factor(n, mode, s, b)
    else:
        raise AttentionConfigError(f"unknown attention mode {mode!r}")
    return kernels.softmax(keys @ (factor * q_n) / math.sqrt(d))


# -- multi-head attention ------------------------------------------------------


def multi_head_attention(
    x: torch.Tensor,
    weights: dict,
    config: AttentionConfig,
    head_params: dict | None = None,
    position_offset: int = 0,
    trace: list | None = None,
    force_unit_scale: bool = False,
) -> torch.Tensor:
    """Causal self-attention over ``x`` of shape ``(B, T, C)``.

    ``weights`` holds ``wq, wk, wv, wo`` as ``(C, C)`` matrices in ``nn.Linear``
    layout. ``head_params`` may carry ``s``, ``b`` (per head) and ``pn``.
    RoPE is applied at absolute positions ``position_offset + t``; the visible
    count for row ``t`` is ``t + 1``.

    When ``trace`` is a list, the attention distribution of the final query
    row is appended as a ``(B, H, T)`` tensor. ``force_unit_scale`` replaces
    the mode's factor by 1 (a test hook).
    """
    if x.dim() != 3 or x.shape[-1] != config.hidden_size:
        raise AttentionConfigError(f"expected (B, T, {config.hidden_size}) input, got {tuple(x.shape)}")
    B, T, C = x.shape
    H, d = config.num_heads, config.head_dim
    head_params = head_params or {}

    q = F.linear(x, weights["wq"]).view(B, T, H, d).transpose(1, 2)
    k = F.linear(x, weights["wk"]).view(B, T, H, d).transpose(1, 2)
    v = F.linear(x, weights["wv"]).view(B, T, H, d).transpose(1, 2)

    positions = torch.arange(position_offset, position_offset + T, device=x.device)
    cos, sin = rope_tables(positions, d, config.rope_theta, x.dtype)
    q = apply_rope(q, cos, sin)
    k = apply_rope(k, cos, sin)

    if force_unit_scale:
        factor = torch.ones(H, T, dtype=x.dtype, device=x.device)
    else:
        factor = row_scale(
            config.mode,
            T,
            s=head_params.get("s"),
            b=head_params.get("b"),
            pn=head_params.get("pn"),
            dtype=x.dtype,
            device=x.device,
        )
    if factor is not None:
        q = q * factor[None, :, :, None]

    if trace is None:
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
    else:
        probs = causal_attention_probs(q, k)
        trace.append(probs[:, :, -1, :].detach())
        y = probs @ v

    y = y.transpose(1, 2).reshape(B, T, C)
    return F.linear(y, weights["wo"])


def causal_attention_probs(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Materialized ``(B, H, T, T)`` causal attention matrix for already-scaled queries."""
    T, d = q.shape[-2], q.shape[-1]
    logits = (q @ k.transpose(-2, -1)) / math.sqrt(d)
    mask = torch.ones(T, T, dtype=torch.bool, device=q.device).tril()
    logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=-1)
