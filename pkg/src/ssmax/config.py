"""Plain-text experiment config.

INI syntax with up to four sections, each mapping ``key = value`` onto the
fields of one dataclass::

    [model]      ModelConfig     (num_layers, hidden_size, rope_theta, ...)
    [train]      TrainConfig     pretraining optimizer/schedule/data
    [sft]        TrainConfig     fine-tuning; unset keys use the fine-tuning defaults
                 plus ``num_rows``, the size of the generated QA set
    [variant]    VariantPlan     switch_fraction, post_switch_warmup_fraction

Unknown keys are errors. ``[model] seq_len`` always follows ``[train] seq_len``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ssmax.model import ModelConfig
from ssmax.training import TrainConfig, VariantPlan, sft_defaults

_CASTS = {"int": int, "float": float, "str": str}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sft: TrainConfig = field(default_factory=sft_defaults)
    sft_rows: int = 512
    variant: dict = field(default_factory=dict)

    def plan(self, variant: str) -> VariantPlan:
        return VariantPlan(variant, **self.variant)

    def as_dict(self) -> dict:
        return {
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "sft": dataclasses.asdict(self.sft),
            "sft_rows": self.sft_rows,
            "variant": dict(self.variant),
        }


def _coerce(cls, section: str, items: dict) -> dict:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in items.items():
        if key not in fields:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        cast = _CASTS[str(fields[key].type).split("|")[0].strip()]
        try:
            out[key] = cast(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc
    return out


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(parser.sections()) - {"model", "train", "sft", "variant"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    section = lambda name: dict(parser[name]) if parser.has_section(name) else {}  # noqa: E731

    try:
        train = TrainConfig(**_coerce(TrainConfig, "train", section("train")))
        model_items = _coerce(ModelConfig, "model", section("model"))
        model_items["seq_len"] = train.seq_len
        model = ModelConfig(**model_items)
        sft_items = section("sft")
        sft_rows = int(sft_items.pop("num_rows", 512))
        sft_items = _coerce(TrainConfig, "sft", sft_items)
        sft_items.setdefault("seq_len", train.seq_len)
        sft = sft_defaults(**sft_items)
        variant = {k: float(v) for k, v in section("variant").items()}
        bad = set(variant) - {"switch_fraction", "post_switch_warmup_fraction"}
        if bad:
            raise ConfigError(f"[variant] unknown keys {sorted(bad)}")
        VariantPlan("f", **variant)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(model, train, sft, sft_rows, variant)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name, obj in (("model", cfg.model), ("train", cfg.train)):
        lines.append(f"[{name}]")
        lines += [f"{k} = {v}" for k, v in dataclasses.asdict(obj).items() if not (name == "model" and k == "seq_len")]
        lines.append("")
    lines.append("[sft]")
    lines.append(f"num_rows = {cfg.sft_rows}")
    lines += [f"{k} = {v}" for k, v in dataclasses.asdict(cfg.sft).items()]
    lines.append("")
    if cfg.variant:
        lines.append("[variant]")
        lines += [f"{k} = {v}" for k, v in cfg.variant.items()]
        lines.append("")
    return "\n".join(lines)
