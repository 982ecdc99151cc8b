import dataclasses
import math

import numpy as np
import pytest
import torch

from ssmax import data
from ssmax.model import ModelConfig, Transformer, average_log_length_scale, lm_loss
from ssmax.training import (
    DatasetError,
    NumericAbort,
    SFTRow,
    TrainConfig,
    VariantPlan,
    adamw_step,
    clip_gradients,
    freeze_head_scales,
    generate_sft_dataset,
    init_model,
    lr_at,
    run_pretraining,
    run_sft,
    sft_defaults,
)

TINY = ModelConfig(num_layers=2, num_heads=2, hidden_size=16, ffn_size=32, seq_len=32)


def tiny_train(**kw):
    base = dict(seq_len=32, batch_size=2, total_steps=4, warmup_steps=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# -- AdamW -------------------------------------------------------------------


def hand_adamw(p, grads, lr, b1, b2, eps, wd, decay):
    """Plain-float reference AdamW, one update per entry of ``grads``."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        if decay:
            p = p - lr * wd * p
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
    return p


def test_adamw_scalar_matches_hand_trace():
    cfg = TrainConfig(lr=0.01, weight_decay=0.1, grad_clip=1e9)
    p = torch.nn.Parameter(torch.tensor(0.7, dtype=torch.float64))
    state = {}
    for step in (1, 2, 3):
        adamw_step({"x": p}, {"x": torch.tensor(0.3, dtype=torch.float64)}, state, cfg, step)
    expected = hand_adamw(0.7, [0.3] * 3, 0.01, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, decay=False)
    assert p.item() == pytest.approx(expected, abs=1e-15)


def test_adamw_matrix_gets_decoupled_decay():
    cfg = TrainConfig(lr=0.01, weight_decay=0.1, grad_clip=1e9)
    init = torch.tensor([[0.5, -1.0], [2.0, 0.25]], dtype=torch.float64)
    g = torch.tensor([[0.1, 0.2], [-0.3, 0.4]], dtype=torch.float64)
    p = torch.nn.Parameter(init.clone())
    state = {}
    for step in (1, 2, 3):
        adamw_step({"w": p}, {"w": g}, state, cfg, step)
    for idx in np.ndindex(2, 2):
        ref = hand_adamw(init[idx].item(), [g[idx].item()] * 3, 0.01, cfg.beta1, cfg.beta2, cfg.eps, 0.1, decay=True)
        assert p[idx].item() == pytest.approx(ref, abs=1e-14)


def test_rank1_parameter_not_decayed():
    cfg = TrainConfig(lr=0.1, weight_decay=0.1)
    gain = torch.nn.Parameter(torch.ones(4, dtype=torch.float64))
    adamw_step({"g": gain}, {"g": torch.zeros(4, dtype=torch.float64)}, {}, cfg, 1)
    assert torch.equal(gain, torch.ones(4, dtype=torch.float64))


def test_zero_grad_zero_decay_is_fixed_point():
    cfg = TrainConfig(lr=0.1, weight_decay=0.0)
    w = torch.nn.Parameter(torch.randn(3, 3, dtype=torch.float64))
    before = w.detach().clone()
    state = {}
    for step in (1, 2):
        adamw_step({"w": w}, {"w": torch.zeros(3, 3, dtype=torch.float64)}, state, cfg, step)
    assert torch.equal(w, before)


def test_clip_bounds_post_norm():
    gen = torch.Generator().manual_seed(0)
    grads = {"a": torch.randn(10, generator=gen) * 5, "b": torch.randn(3, 3, generator=gen) * 5}
    clipped, norm, fired = clip_gradients(grads, 1.0)
    assert fired and norm > 1.0
    post = math.sqrt(sum(float((g.double() ** 2).sum()) for g in clipped.values()))
    assert post <= 1.0 + 1e-6


def test_clip_no_op_below_threshold():
    grads = {"a": torch.tensor([0.3, 0.4])}
    out, norm, fired = clip_gradients(grads, 1.0)
    assert not fired and norm == pytest.approx(0.5) and out["a"] is grads["a"]


def test_non_finite_grad_aborts():
    p = torch.nn.Parameter(torch.ones(2))
    with pytest.raises(NumericAbort, match="non-finite"):
        adamw_step({"p": p}, {"p": torch.tensor([1.0, float("nan")])}, {}, TrainConfig(), 1)
    assert torch.equal(p, torch.ones(2))


# -- schedule ----------------------------------------------------------------


def test_lr_warmup_boundary_and_midpoint():
    cfg = TrainConfig(lr=1e-3, warmup_steps=100, total_steps=1000)
    assert lr_at(100, cfg) == 1e-3
    assert lr_at(50, cfg) == pytest.approx(5e-4, rel=1e-15)
    assert lr_at(999, cfg) == 1e-3


def test_lr_cosine_midpoint_and_end():
    cfg = TrainConfig(lr=1e-3, warmup_steps=100, total_steps=1100, schedule="cosine")
    assert lr_at(600, cfg) == pytest.approx(5e-4, rel=1e-12)
    assert lr_at(1100, cfg) == pytest.approx(0.0, abs=1e-18)


def test_lr_rejects_step_zero():
    with pytest.raises(ValueError):
        lr_at(0, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(total_steps=10, warmup_steps=11)
    with pytest.raises(ValueError):
        TrainConfig(schedule="linear")


# -- variant plans -----------------------------------------------------------


def test_variant_f_plan_proportions():
    plan = VariantPlan("f")
    desc = plan.describe(2000)
    assert desc["switch_step"] == 1750
    assert desc["post_switch_warmup"] == 10  # 250 / 25
    assert VariantPlan("a").describe(2000)["switch_step"] is None


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        VariantPlan("z")


# -- pretraining -------------------------------------------------------------


def test_zero_steps_returns_initialization():
    cfg = tiny_train(total_steps=0, warmup_steps=0)
    result = run_pretraining(TINY, cfg, VariantPlan("b"))
    ref = init_model(TINY, VariantPlan("b"), cfg.seed)
    for (k, v), (k2, v2) in zip(result.model.state_dict().items(), ref.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    assert result.records == []


def test_variant_c_has_no_s_and_matches_frozen_b_bitwise():
    cfg = tiny_train()
    c = run_pretraining(TINY, cfg, VariantPlan("c"))
    assert not any(k.endswith("attn.s") for k in c.model.state_dict())

    b_model = init_model(TINY, VariantPlan("b"), cfg.seed)
    freeze_head_scales(b_model, 1.0)
    b = run_pretraining(TINY, cfg, VariantPlan("b"), model=b_model)

    assert [r["loss"] for r in b.records] == [r["loss"] for r in c.records]
    b_state = b.model.state_dict()
    for k, v in c.model.state_dict().items():
        assert torch.equal(v, b_state[k]), k


def test_variants_share_initial_weights():
    """At step 0 variants differ only in the normalization parameters."""
    a = init_model(TINY, VariantPlan("a"), 5).state_dict()
    d = init_model(TINY, VariantPlan("d"), 5).state_dict()
    extra = set(d) - set(a)
    assert extra == {f"layers.{i}.attn.{p}" for i in range(2) for p in ("s", "b")}
    for k in a:
        assert torch.equal(a[k], d[k])


def test_variant_e_keeps_weights_and_sets_average_scale():
    cfg = tiny_train()
    a = run_pretraining(TINY, cfg, VariantPlan("a"))
    e = run_pretraining(TINY, cfg, VariantPlan("e"))
    assert e.model.config.attention == "ssmax"
    assert len(e.records) == cfg.total_steps
    e_state = e.model.state_dict()
    for k, v in a.model.state_dict().items():
        assert torch.equal(v, e_state[k]), k
    expected = average_log_length_scale(cfg.seq_len)
    for i in range(TINY.num_layers):
        assert torch.allclose(e_state[f"layers.{i}.attn.s"], torch.full((2,), expected))


def test_variant_f_switches_mode_mid_run():
    cfg = tiny_train(total_steps=16, warmup_steps=2)
    f = run_pretraining(TINY, cfg, VariantPlan("f"))
    assert f.plan["switch_step"] == 14
    assert f.model.config.attention == "ssmax"
    assert [r["step"] for r in f.records] == list(range(1, 17))
    # post-switch warmup restarts the schedule: round(2/25) = 0 steps here, so lr is back at peak
    assert f.records[14]["lr"] == cfg.lr
    # the trained s moved away from its replacement value
    s = f.model.layers[0].attn.s.detach()
    assert not torch.allclose(s, torch.full_like(s, average_log_length_scale(cfg.seq_len)))


def test_variant_f_post_switch_warmup_is_linear():
    cfg = tiny_train(total_steps=400, warmup_steps=10)
    plan = VariantPlan("f")
    seen = []
    run_pretraining(TINY, dataclasses.replace(cfg, batch_size=1), plan, on_step=seen.append)
    switch, warm = plan.switch_step(400), plan.post_switch_warmup(400)
    assert (switch, warm) == (350, 2)
    assert seen[switch]["lr"] == pytest.approx(cfg.lr / 2)
    assert seen[switch + 1]["lr"] == pytest.approx(cfg.lr)


def test_pretraining_deterministic():
    cfg = tiny_train()
    r1 = run_pretraining(TINY, cfg, VariantPlan("d"))
    r2 = run_pretraining(TINY, cfg, VariantPlan("d"))
    assert [r["loss"] for r in r1.records] == [r["loss"] for r in r2.records]
    for (k, v), v2 in zip(r1.model.state_dict().items(), r2.model.state_dict().values()):
        assert torch.equal(v, v2), k


@pytest.mark.parametrize("variant", ["a", "b", "c", "d", "e", "f", "pn"])
def test_smoke_loss_decreases(variant):
    cfg = tiny_train(total_steps=40, warmup_steps=5, lr=3e-3, batch_size=4)
    r = run_pretraining(TINY, cfg, VariantPlan(variant))
    first = np.mean([x["loss"] for x in r.records[:5]])
    last = np.mean([x["loss"] for x in r.records[-5:]])
    assert last < first


def test_numeric_abort_keeps_last_good_weights():
    cfg = tiny_train(total_steps=3, lr=1.0)
    model = init_model(TINY, VariantPlan("a"), 0)
    with torch.no_grad():
        model.norm_f.weight.fill_(float("nan"))
    with pytest.raises(NumericAbort) as info:
        run_pretraining(TINY, cfg, VariantPlan("a"), model=model)
    assert info.value.step == 1 and info.value.model is model


# -- fine-tuning -------------------------------------------------------------


def test_sft_row_rejects_empty_answer():
    with pytest.raises(DatasetError):
        SFTRow(np.arange(10), np.zeros(10, bool))


def test_sft_dataset_masks_answer_digits():
    rows = generate_sft_dataset(np.random.default_rng(0), 3, 200)
    for row in rows:
        assert len(row.tokens) == 201
        answer = data.decode(row.tokens[row.answer_mask])
        assert len(answer) == data.ANSWER_DIGITS and answer.isdigit()
        assert answer in data.decode(row.tokens[: np.argmax(row.answer_mask)])


def test_mask_excluding_all_gives_zero_loss_and_grads():
    model = Transformer(TINY, seed=0)
    tokens = torch.randint(0, 256, (2, 9), generator=torch.Generator().manual_seed(0))
    loss, _ = lm_loss(model(tokens[:, :-1]), tokens[:, 1:], torch.zeros(2, 8, dtype=torch.bool))
    loss.backward()
    assert loss.item() == 0.0
    assert all(torch.count_nonzero(p.grad) == 0 for p in model.parameters() if p.grad is not None)


def test_mask_covering_all_equals_summed_lm_loss():
    model = Transformer(TINY, seed=0).double()
    tokens = torch.randint(0, 256, (3, 9), generator=torch.Generator().manual_seed(1))
    logits = model(tokens[:, :-1])
    masked, _ = lm_loss(logits, tokens[:, 1:], torch.ones(3, 8, dtype=torch.bool))
    plain, per_pos = lm_loss(logits, tokens[:, 1:])
    assert masked.item() == pytest.approx(per_pos.sum().item() / 3, rel=1e-12)
    assert masked.item() == pytest.approx(plain.item() * 8, rel=1e-12)


def test_sft_rejects_ragged_or_empty_sets():
    model = Transformer(TINY, seed=0)
    with pytest.raises(DatasetError):
        run_sft(model, [], sft_defaults(total_steps=1, warmup_steps=0))
    rows = generate_sft_dataset(np.random.default_rng(0), 1, 150) + generate_sft_dataset(np.random.default_rng(1), 1, 170)
    with pytest.raises(DatasetError):
        run_sft(model, rows, sft_defaults(total_steps=1, warmup_steps=0))


@pytest.mark.slow
def test_single_row_overfit_on_desk_config():
    cfg = ModelConfig()
    model = Transformer(cfg, seed=0)
    rows = generate_sft_dataset(np.random.default_rng(0), 1, cfg.seq_len)
    sft = sft_defaults(lr=1e-3, total_steps=500, warmup_steps=20, batch_size=1, seq_len=cfg.seq_len)
    result = run_sft(model, rows, sft)
    losses = [r["loss"] for r in result.records]
    assert min(losses) < 0.01
