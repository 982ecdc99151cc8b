"""Pretraining and fine-tuning loops, AdamW, and the variant switchboard.

Variants:

    a  softmax throughout
    b  ssmax with a learnable per-head ``s``
    c  ssmax with ``s`` fixed to 1
    d  ssmax with learnable per-head ``s`` and ``b``
    e  softmax pretraining, converted to ssmax afterwards (no further steps)
    f  softmax for the first 7/8 of the steps, then ssmax with a fresh warmup
    pn softmax with a learned per-length table ``p_n`` (the length-dependence probe)
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from ssmax import data
from ssmax.model import ModelConfig, Transformer, lm_loss, replace_softmax_with_ssmax

log = logging.getLogger(__name__)

VARIANT_MODES = {
    "a": "softmax",
    "b": "ssmax",
    "c": "ssmax_no_scale",
    "d": "ssmax_bias",
    "e": "softmax",
    "f": "softmax",
    "pn": "pn_probe",
}


class NumericAbort(RuntimeError):
    """Raised on a non-finite loss or gradient; the model keeps its last good weights."""

    def __init__(self, message, step=None, model=None, state=None):
        super().__init__(message)
        self.step = step
        self.model = model
        self.state = state


class DatasetError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    schedule: str = "constant"
    warmup_steps: int = 100
    seq_len: int = 256
    batch_size: int = 32
    total_steps: int = 2000
    seed: int = 0
    kv_fraction: float = 0.5
    copy_fraction: float = 0.3

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.warmup_steps < 0 or self.warmup_steps > max(self.total_steps, 0):
            if not (self.total_steps == 0 and self.warmup_steps >= 0):
                raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def sft_defaults(**overrides) -> TrainConfig:
    """Fine-tuning optimizer settings: betas (0.9, 0.999), no decay, cosine
    schedule; warmup defaults to a tenth of the step budget."""
    base = dict(lr=2e-4, beta1=0.9, beta2=0.999, weight_decay=0.0, schedule="cosine", total_steps=500)
    base.update(overrides)
    base.setdefault("warmup_steps", base["total_steps"] // 10)
    return TrainConfig(**base)


@dataclass
class VariantPlan:
    variant: str = "a"
    switch_fraction: float = 7 / 8
    post_switch_warmup_fraction: float = 1 / 25

    def __post_init__(self):
        if self.variant not in VARIANT_MODES:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANT_MODES)}")
        if not 0 < self.switch_fraction < 1:
            raise ValueError("switch_fraction must lie in (0, 1)")

    @property
    def initial_mode(self) -> str:
        return VARIANT_MODES[self.variant]

    def switch_step(self, total_steps: int) -> int | None:
        """Number of softmax steps before the switch (variant f only)."""
        if self.variant != "f":
            return None
        return int(round(self.switch_fraction * total_steps))

    def post_switch_warmup(self, total_steps: int) -> int | None:
        if self.variant != "f":
            return None
        return int(round(self.post_switch_warmup_fraction * (total_steps - self.switch_step(total_steps))))

    def describe(self, total_steps: int) -> dict:
        return {
            "variant": self.variant,
            "initial_mode": self.initial_mode,
            "switch_step": self.switch_step(total_steps),
            "post_switch_warmup": self.post_switch_warmup(total_steps),
            "replace_after_training": self.variant == "e",
        }


# -- optimizer ---------------------------------------------------------------


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``lr`` over ``warmup_steps``, then constant or cosine to 0 at ``total_steps``."""
    if step < 1:
        raise ValueError("steps are 1-based")
    if config.warmup_steps and step <= config.warmup_steps:
        return config.lr * step / config.warmup_steps
    if config.schedule == "constant":
        return config.lr
    decay_steps = config.total_steps - config.warmup_steps
    if decay_steps <= 0:
        return config.lr
    progress = min((step - config.warmup_steps) / decay_steps, 1.0)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads: dict[str, torch.Tensor]) -> float:
    return math.sqrt(math.fsum(float(g.double().pow(2).sum()) for g in grads.values()))


def clip_gradients(grads: dict, threshold: float, step: int | None = None):
    """Scale ``grads`` so their global norm is at most ``threshold``.

    Returns ``(grads, pre_clip_norm, clipped)``; raises :class:`NumericAbort`
    on a non-finite norm.
    """
    norm = global_grad_norm(grads)
    if not math.isfinite(norm):
        bad = sorted(n for n, g in grads.items() if not torch.isfinite(g).all())
        raise NumericAbort(f"non-finite gradient at step {step} in {bad}", step=step)
    if norm <= threshold:
        return grads, norm, False
    coef = threshold / (norm + 1e-6)
    return {n: g * coef for n, g in grads.items()}, norm, True


@torch.no_grad()
def adamw_step(params: dict, grads: dict, state: dict, config: TrainConfig, step: int, lr: float | None = None) -> dict:
    """One in-place AdamW update with global-norm clipping.

    Decoupled weight decay touches only tensors of rank >= 2. ``state`` maps
    parameter names to ``{"m", "v"}`` and is created lazily. Returns the
    pre-clip gradient norm and whether clipping fired.
    """
    if step < 1:
        raise ValueError("steps are 1-based")
    if set(params) != set(grads):
        raise ValueError("params and grads must have the same keys")
    lr = config.lr if lr is None else lr
    grads, norm, clipped = clip_gradients(grads, config.grad_clip, step)

    bc1 = 1 - config.beta1**step
    bc2 = 1 - config.beta2**step
    for name, p in params.items():
        g = grads[name]
        st = state.setdefault(name, {"m": torch.zeros_like(p), "v": torch.zeros_like(p)})
        if config.weight_decay and p.dim() >= 2:
            p.mul_(1 - lr * config.weight_decay)
        st["m"].mul_(config.beta1).add_(g, alpha=1 - config.beta1)
        st["v"].mul_(config.beta2).addcmul_(g, g, value=1 - config.beta2)
        denom = (st["v"] / bc2).sqrt_().add_(config.eps)
        p.addcdiv_(st["m"], denom, value=-lr / bc1)
    return {"grad_norm": norm, "clipped": clipped}


def trainable_parameters(model: torch.nn.Module) -> dict[str, torch.nn.Parameter]:
    return {n: p for n, p in model.named_parameters() if p.requires_grad}


def freeze_head_scales(model: Transformer, value: float = 1.0) -> None:
    """Pin every per-head ``s`` to ``value`` and exclude it from training."""
    with torch.no_grad():
        for block in model.layers:
            block.attn.s.fill_(value)
            block.attn.s.requires_grad_(False)


# -- loops -------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Transformer
    state: dict
    records: list[dict] = field(default_factory=list)
    step: int = 0
    plan: dict = field(default_factory=dict)


def _batch_to_tensors(batch: np.ndarray):
    t = torch.from_numpy(batch)
    return t[:, :-1], t[:, 1:]


def train_loop(
    model: Transformer,
    batches: Callable[[int], tuple],
    config: TrainConfig,
    steps: range,
    state: dict | None = None,
    lr_fn: Callable[[int], float] | None = None,
    variant: str = "",
    records: list | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> tuple[dict, list]:
    """Run the optimizer over ``steps`` (1-based global step numbers).

    ``batches(step)`` returns ``(inputs, targets, mask)``; ``mask`` may be None.
    """
    state = {} if state is None else state
    records = [] if records is None else records
    lr_fn = lr_fn or (lambda step: lr_at(step, config))
    model.train()
    for step in steps:
        inputs, targets, mask = batches(step)
        params = trainable_parameters(model)
        for p in params.values():
            p.grad = None
        loss, _ = lm_loss(model(inputs), targets, mask)
        if not torch.isfinite(loss):
            raise NumericAbort(f"non-finite loss at step {step}", step=step, model=model, state=state)
        loss.backward()
        grads = {n: p.grad if p.grad is not None else torch.zeros_like(p) for n, p in params.items()}
        lr = lr_fn(step)
        try:
            info = adamw_step(params, grads, state, config, step, lr)
        except NumericAbort as exc:
            exc.model, exc.state = model, state
            raise
        record = {"step": step, "loss": loss.item(), "lr": lr, "variant": variant, "grad_norm": info["grad_norm"]}
        records.append(record)
        if on_step:
            on_step(record)
    return state, records


def init_model(model_config: ModelConfig, plan: VariantPlan, seed: int) -> Transformer:
    config = dataclasses.replace(model_config, attention=plan.initial_mode)
    return Transformer(config, seed=seed)


def pretrain_batches(config: TrainConfig):
    """Deterministic stream: batch ``k`` depends only on ``(seed, k)``."""

    def get(step: int):
        rng = np.random.default_rng([config.seed, step])
        inputs, targets = _batch_to_tensors(data.corpus_batch(rng, config.batch_size, config.seq_len + 1, config.kv_fraction, config.copy_fraction))
        return inputs, targets, None

    return get


def run_pretraining(
    model_config: ModelConfig,
    config: TrainConfig,
    plan: VariantPlan,
    model: Transformer | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Pretrain one variant. Initialization and data order depend only on ``config.seed``."""
    if model_config.seq_len != config.seq_len:
        model_config = dataclasses.replace(model_config, seq_len=config.seq_len)
    model = model if model is not None else init_model(model_config, plan, config.seed)
    batches = pretrain_batches(config)
    total = config.total_steps
    records: list[dict] = []
    state: dict = {}

    switch = plan.switch_step(total)
    if switch is None:
        state, records = train_loop(model, batches, config, range(1, total + 1), state, variant=plan.variant, records=records, on_step=on_step)
        if plan.variant == "e":
            model = replace_softmax_with_ssmax(model, config.seq_len)
    else:
        state, records = train_loop(model, batches, config, range(1, switch + 1), state, variant=plan.variant, records=records, on_step=on_step)
        model = replace_softmax_with_ssmax(model, config.seq_len)
        post = dataclasses.replace(config, warmup_steps=plan.post_switch_warmup(total), total_steps=total - switch)

        def post_lr(step):
            return lr_at(step - switch, post)

        # moments carry over by name; the new s tensors start from zero moments
        state, records = train_loop(
            model, batches, config, range(switch + 1, total + 1), state, lr_fn=post_lr, variant=plan.variant, records=records, on_step=on_step
        )
    return TrainResult(model, state, records, total, plan.describe(total))


# -- supervised fine-tuning --------------------------------------------------


@dataclass
class SFTRow:
    tokens: np.ndarray  # full sequence, inputs are tokens[:-1]
    answer_mask: np.ndarray  # over tokens; True on answer bytes

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.answer_mask = np.asarray(self.answer_mask, dtype=bool)
        if self.tokens.shape != self.answer_mask.shape:
            raise DatasetError("answer mask must match the token sequence")
        if not self.answer_mask[1:].any():
            raise DatasetError("row has an empty answer span")

    @property
    def target_mask(self) -> np.ndarray:
        return self.answer_mask[1:]


def generate_sft_dataset(rng: np.random.Generator, num_rows: int, length: int) -> list[SFTRow]:
    """Needle-retrieval QA rows of a fixed length, answer at the very end."""
    rows = []
    for _ in range(num_rows):
        try:
            rec = data.build_record(rng, length + 1)
        except ValueError as exc:
            raise DatasetError(str(exc)) from exc
        rows.append(SFTRow(rec.tokens, rec.answer_mask))
    return rows


def run_sft(model: Transformer, rows: list[SFTRow], config: TrainConfig, on_step=None) -> TrainResult:
    """Fine-tune on answer-span loss only (summed over the span, averaged over rows)."""
    if not rows:
        raise DatasetError("empty fine-tuning set")
    lengths = {len(r.tokens) for r in rows}
    if len(lengths) != 1:
        raise DatasetError("all rows must have the same length")
    tokens = torch.from_numpy(np.stack([r.tokens for r in rows]))
    masks = torch.from_numpy(np.stack([r.target_mask for r in rows]))
    # seeded epoch-wise shuffling, concatenated until every step has a full batch
    order_rng = np.random.default_rng([config.seed, 7])
    num_rows = len(rows)
    batch = min(config.batch_size, num_rows)
    epochs = math.ceil(config.total_steps * batch / num_rows)
    order = np.concatenate([order_rng.permutation(num_rows) for _ in range(epochs)] + [np.zeros(0, np.int64)])

    def batches(step):
        idx = torch.from_numpy(order[(step - 1) * batch : step * batch])
        return tokens[idx, :-1], tokens[idx, 1:], masks[idx]

    state, records = train_loop(model, batches, config, range(1, config.total_steps + 1), variant="sft", on_step=on_step)
    return TrainResult(model, state, records, config.total_steps)
