import pytest

from ssmax.config import ConfigError, dump_config, parse_config

EXAMPLE = """
[model]
num_layers = 2
hidden_size = 64   # four heads of 16
num_heads = 4
ffn_size = 192

[train]
seq_len = 128
lr = 1e-3
total_steps = 400
warmup_steps = 40

[sft]
num_rows = 64
total_steps = 50

[variant]
switch_fraction = 0.75
"""


def test_parse_example():
    cfg = parse_config(EXAMPLE)
    assert cfg.model.num_layers == 2 and cfg.model.hidden_size == 64
    assert cfg.model.seq_len == 128  # follows [train]
    assert cfg.train.lr == 1e-3 and cfg.train.batch_size == 32
    assert cfg.sft.total_steps == 50 and cfg.sft.schedule == "cosine" and cfg.sft.beta2 == 0.999
    assert cfg.sft.seq_len == 128 and cfg.sft_rows == 64
    assert cfg.plan("f").switch_step(400) == 300


def test_empty_config_is_defaults():
    cfg = parse_config("")
    assert cfg.model.num_layers == 4 and cfg.train.total_steps == 2000


def test_dump_round_trip():
    cfg = parse_config(EXAMPLE)
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize(
    "text",
    [
        "[model]\nlayers = 3\n",
        "[optimizer]\nlr = 1\n",
        "[train]\nlr = fast\n",
        "[train]\ntotal_steps = 10\nwarmup_steps = 20\n",
        "[variant]\nswitch_fraction = 1.5\n",
        "[variant]\nswitch_step = 3\n",
        "[model]\nhidden_size = 30\nnum_heads = 4\n",
        "not an ini file",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)
