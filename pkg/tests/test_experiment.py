import dataclasses

from ssmax import experiment
from ssmax.config import ExperimentConfig, parse_config

TINY_INI = """
[model]
num_layers = 1
num_heads = 2
hidden_size = 16
ffn_size = 32

[train]
seq_len = 120
batch_size = 2
total_steps = 3
warmup_steps = 1

[sft]
total_steps = 2
batch_size = 2
num_rows = 4
"""


def test_run_key_ignores_defaulted_fields_but_not_changes():
    cfg = ExperimentConfig()
    key = experiment.run_key(cfg, "a", 0)
    assert key == experiment.run_key(dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, copy_fraction=0.3)), "a", 0)
    assert key != experiment.run_key(dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, copy_fraction=0.2)), "a", 0)
    assert key != experiment.run_key(cfg, "b", 0)
    assert key != experiment.run_key(cfg, "a", 1)


def test_run_variant_caches(tmp_path):
    cfg = parse_config(TINY_INI)
    run = experiment.run_variant(cfg, "b", 3, cache_dir=tmp_path)
    assert len(run.losses) == 3 and (run.directory / "sft.ckpt").exists()
    stamp = (run.directory / "sft.ckpt").stat().st_mtime_ns
    again = experiment.run_variant(cfg, "b", 3, cache_dir=tmp_path)
    assert again.losses == run.losses and (run.directory / "sft.ckpt").stat().st_mtime_ns == stamp
    assert run.smoothed_final_loss(window=2) == sum(run.losses[-2:]) / 2
    assert run.finetuned().config.seq_len == 120


def test_cached_eval_memoizes(tmp_path):
    run = experiment.VariantRun("a", 0, tmp_path, [1.0], {})
    calls = []
    compute = lambda: calls.append(1) or {"x": 1}  # noqa: E731
    assert experiment.cached_eval(run, "demo", {"k": 1}, compute) == {"x": 1}
    assert experiment.cached_eval(run, "demo", {"k": 1}, compute) == {"x": 1}
    assert len(calls) == 1
    experiment.cached_eval(run, "demo", {"k": 2}, compute)
    assert len(calls) == 2


def test_niah_accuracy_weights_by_samples():
    rows = [
        {"context_size": 8, "accuracy": 1.0, "samples": 3},
        {"context_size": 8, "accuracy": 0.0, "samples": 1},
        {"context_size": 16, "accuracy": 0.5, "samples": 2},
    ]
    assert experiment.niah_accuracy(rows, 8) == 0.75
