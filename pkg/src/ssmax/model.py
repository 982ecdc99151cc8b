"""Decoder-only transformer: RoPE, RMSNorm, SwiGLU, no projection biases."""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ssmax.attention import MODES, MODES_WITH_B, MODES_WITH_S, AttentionConfig, multi_head_attention


class ModelConfigError(ValueError):
    pass


class ModelDomainError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    hidden_size: int = 128
    ffn_size: int = 384
    vocab_size: int = 256
    rope_theta: float = 10000.0
    attention: str = "softmax"
    seq_len: int = 256
    norm_eps: float = 1e-6
    init_std: float = 0.02  # attention/FFN matrices; embeddings and LM head use 0.02
    scale_init: str = "one"  # initial s for ssmax/ssmax_bias: "one" or "mean_log" (N / sum ln n)

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "hidden_size", "ffn_size", "vocab_size", "seq_len"):
            if getattr(self, name) <= 0:
                raise ModelConfigError(f"{name} must be positive")
        if self.hidden_size % self.num_heads:
            raise ModelConfigError("hidden_size must be divisible by num_heads")
        if self.attention not in MODES:
            raise ModelConfigError(f"unknown attention mode {self.attention!r}")
        if self.scale_init not in ("one", "mean_log"):
            raise ModelConfigError(f"scale_init must be 'one' or 'mean_log', got {self.scale_init!r}")
        if not self.rope_theta > 0:
            raise ModelConfigError("rope_theta must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(self.head_dim, self.num_heads, self.attention, self.rope_theta)


# Appendix-scale reference values; desk runs use the class defaults above.
FULL_SCALE = ModelConfig(
    num_layers=12, num_heads=12, hidden_size=768, ffn_size=2048, vocab_size=50257, seq_len=1024
)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class SwiGLU(nn.Module):
    def __init__(self, hidden: int, ffn: int):
        super().__init__()
        self.w_gate = nn.Linear(hidden, ffn, bias=False)
        self.w_up = nn.Linear(hidden, ffn, bias=False)
        self.w_down = nn.Linear(ffn, hidden, bias=False)

    def forward(self, x):
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))


class Attention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        C, H = config.hidden_size, config.num_heads
        self.wq = nn.Linear(C, C, bias=False)
        self.wk = nn.Linear(C, C, bias=False)
        self.wv = nn.Linear(C, C, bias=False)
        self.wo = nn.Linear(C, C, bias=False)
        # one scalar per head; s = 1 (or N / sum ln n), b = 0; the p_n probe always starts at s = 1
        if config.attention in MODES_WITH_S:
            s0 = average_log_length_scale(config.seq_len) if config.scale_init == "mean_log" and config.attention != "pn_probe" else 1.0
            self.s = nn.Parameter(torch.full((H,), s0))
        if config.attention in MODES_WITH_B:
            self.b = nn.Parameter(torch.zeros(H))

    def forward(self, x, attn_config, pn=None, position_offset=0, trace=None, force_unit_scale=False):
        weights = {"wq": self.wq.weight, "wk": self.wk.weight, "wv": self.wv.weight, "wo": self.wo.weight}
        head_params = {"s": getattr(self, "s", None), "b": getattr(self, "b", None), "pn": pn}
        return multi_head_attention(x, weights, attn_config, head_params, position_offset, trace, force_unit_scale)


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(config.hidden_size, config.norm_eps)
        self.attn = Attention(config)
        self.ffn_norm = RMSNorm(config.hidden_size, config.norm_eps)
        self.ffn = SwiGLU(config.hidden_size, config.ffn_size)

    def forward(self, x, attn_config, **kw):
        x = x + self.attn(self.attn_norm(x), attn_config, **kw)
        return x + self.ffn(self.ffn_norm(x))


class Transformer(nn.Module):
    """Pre-norm decoder. ``rope_theta`` is read from ``config`` at call time,
    so swapping the config never touches the weights."""

    def __init__(self, config: ModelConfig, seed: int | None = 0):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.hidden_size)
        self.layers = nn.ModuleList(Block(config) for _ in range(config.num_layers))
        self.norm_f = RMSNorm(config.hidden_size, config.norm_eps)
        self.lm_head = nn.Linear(config.hidden_size, config.vocab_size, bias=False)
        if config.attention == "pn_probe":
            self.pn = nn.Parameter(torch.ones(config.seq_len))
        if seed is not None:
            self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        std_in = self.config.init_std
        out_std = std_in / math.sqrt(2 * self.config.num_layers)
        for name, p in self.named_parameters():
            if p.dim() < 2:
                continue
            if name.startswith(("tok_emb", "lm_head")):
                std = 0.02
            else:
                std = out_std if name.endswith(("wo.weight", "w_down.weight")) else std_in
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)

    def forward(self, tokens: torch.Tensor, trace: list | None = None, force_unit_scale: bool = False):
        """Logits of shape ``(B, T, vocab)``; a 1-d input is treated as one sequence.

        With ``trace`` a list, each layer appends the final row's attention
        distribution ``(B, H, T)``.
        """
        if tokens.dim() == 1:
            return self.forward(tokens[None], trace, force_unit_scale)[0]
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.config.vocab_size):
            raise ModelDomainError(f"token ids must lie in [0, {self.config.vocab_size})")
        attn_config = self.config.attention_config()
        pn = getattr(self, "pn", None)
        x = self.tok_emb(tokens)
        for block in self.layers:
            x = block(x, attn_config, pn=pn, trace=trace, force_unit_scale=force_unit_scale)
        return self.lm_head(self.norm_f(x))

    def head_scale_parameters(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if n.endswith((".attn.s", ".attn.b")) or n == "pn"}


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def lm_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None):
    """Next-token cross-entropy.

    Returns ``(loss, per_position)``; ``per_position`` has the shape of
    ``targets``. Without a mask ``loss`` is the mean; with a mask it is the sum
    of masked-in token losses divided by the number of sequences.
    """
    if logits.shape[:-1] != targets.shape:
        raise ModelDomainError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    per_position = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    per_position = per_position.view(targets.shape)
    if mask is None:
        return per_position.mean(), per_position
    if mask.shape != targets.shape:
        raise ModelDomainError("mask must match targets")
    batch = targets.shape[0] if targets.dim() > 1 else 1
    return (per_position * mask.to(per_position.dtype)).sum() / batch, per_position


def set_rope_theta(model: Transformer, theta: float) -> Transformer:
    """A view of ``model`` with a different RoPE base; parameters are shared, not copied."""
    if not theta > 0:
        raise ModelConfigError(f"rope_theta must be positive, got {theta}")
    view = copy.copy(model)
    view.config = dataclasses.replace(model.config, rope_theta=float(theta))
    return view


def average_log_length_scale(seq_len: int) -> float:
    """``N / sum_{n=1..N} ln n``: the reciprocal of the mean ``ln n`` seen in training."""
    if seq_len < 2:
        raise ModelConfigError("need a training length of at least 2 (sum of ln n is zero at N = 1)")
    return seq_len / math.fsum(math.log(n) for n in range(1, seq_len + 1))


def replace_softmax_with_ssmax(model: Transformer, seq_len: int | None = None) -> Transformer:
    """Convert a softmax model to SSMax with every ``s`` set to the average-log-length scale.

    All existing tensors are carried over bitwise; the source model is not modified.
    """
    if model.config.attention != "softmax":
        raise ModelConfigError(f"expected a softmax model, got {model.config.attention!r}")
    seq_len = model.config.seq_len if seq_len is None else seq_len
    s0 = average_log_length_scale(seq_len)
    config = dataclasses.replace(model.config, attention="ssmax")
    dtype = next(model.parameters()).dtype
    new = Transformer(config, seed=None).to(dtype)
    missing, unexpected = new.load_state_dict(model.state_dict(), strict=False)
    assert not unexpected and all(k.endswith(".attn.s") for k in missing), (missing, unexpected)
    with torch.no_grad():
        for block in new.layers:
            block.attn.s.fill_(s0)
    return new
