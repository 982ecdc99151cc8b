"""Desk-scale experiment pipeline with an on-disk cache.

``run_variant`` pretrains one variant, fine-tunes it, and stores both
checkpoints plus the pretraining loss curve under a directory keyed by a hash
of the resolved config, variant and seed. Evaluations are cached the same way,
so several acceptance checks can share one set of training runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ssmax import checkpoint as ckpt_io
from ssmax import eval as ev
from ssmax.config import ExperimentConfig, dump_config
from ssmax.model import Transformer
from ssmax.training import generate_sft_dataset, run_pretraining, run_sft

log = logging.getLogger(__name__)

SFT_DATA_STREAM = 99


def default_cache_dir() -> Path:
    return Path(os.environ.get("SSMAX_CACHE", Path.cwd() / ".ssmax_cache"))


@dataclass
class VariantRun:
    variant: str
    seed: int
    directory: Path
    losses: list[float]
    plan: dict

    def pretrained(self) -> Transformer:
        return ckpt_io.load(self.directory / "pretrain.ckpt").build_model()

    def finetuned(self) -> Transformer:
        return ckpt_io.load(self.directory / "sft.ckpt").build_model()

    def smoothed_final_loss(self, window: int = 100) -> float:
        return float(np.mean(self.losses[-window:]))


def _non_default(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if getattr(obj, f.name) != f.default}


def run_key(cfg: ExperimentConfig, variant: str, seed: int) -> str:
    """Hash of everything that changes the run. Fields left at their defaults
    are omitted, so adding a new (inert) config field keeps old caches valid."""
    payload = {
        "model": _non_default(cfg.model),
        "train": _non_default(cfg.train),
        "sft": _non_default(cfg.sft),
        "sft_rows": cfg.sft_rows,
        "variant_plan": dict(cfg.variant),
        "variant": variant,
        "seed": seed,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _seeded(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return dataclasses.replace(
        cfg,
        train=dataclasses.replace(cfg.train, seed=seed),
        sft=dataclasses.replace(cfg.sft, seed=seed),
    )


def run_variant(cfg: ExperimentConfig, variant: str, seed: int, cache_dir=None, finetune: bool = True) -> VariantRun:
    """Pretrain (and fine-tune) one variant, reusing cached results when present."""
    cfg = _seeded(cfg, seed)
    out = Path(cache_dir or default_cache_dir()) / f"{variant}-s{seed}-{run_key(cfg, variant, seed)}"
    meta_path = out / "run.json"
    if meta_path.exists() and (not finetune or (out / "sft.ckpt").exists()):
        meta = json.loads(meta_path.read_text())
        return VariantRun(variant, seed, out, meta["losses"], meta["plan"])

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    if (out / "pretrain.ckpt").exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        model = ckpt_io.load(out / "pretrain.ckpt").build_model()
    else:
        log.info("pretraining %s seed %d -> %s", variant, seed, out)
        result = run_pretraining(cfg.model, cfg.train, cfg.plan(variant))
        model = result.model
        ckpt_io.save(ckpt_io.Checkpoint.from_model(model, step=result.step, meta={"variant": variant, "plan": result.plan}), out / "pretrain.ckpt")
        meta = {"losses": [r["loss"] for r in result.records], "plan": result.plan}
        meta_path.write_text(json.dumps(meta))
    if finetune:
        log.info("fine-tuning %s seed %d", variant, seed)
        rows = generate_sft_dataset(np.random.default_rng([seed, SFT_DATA_STREAM]), cfg.sft_rows, cfg.sft.seq_len)
        sft = run_sft(model, rows, cfg.sft)
        ckpt_io.save(ckpt_io.Checkpoint.from_model(sft.model, step=sft.step, meta={"variant": variant, "stage": "sft"}), out / "sft.ckpt")
    return VariantRun(variant, seed, out, meta["losses"], meta["plan"])


def cached_eval(run: VariantRun, name: str, params: dict, compute):
    """Memoize ``compute()`` (JSON-serializable) next to the run's checkpoints."""
    key = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:12]
    path = run.directory / f"eval-{name}-{key}.json"
    if path.exists():
        return json.loads(path.read_text())
    value = compute()
    path.write_text(json.dumps(value))
    return value


def long_context_report(run: VariantRun, theta_multiplier: float = 50.0, niah_samples: int = 200, trials: int = 50, posloss_sequences: int = 32, eval_seed: int = 0) -> dict:
    """Per-position loss to 4N, NIAH accuracy at N, 2N and 4N, and the top-score study at 4N."""
    model = run.finetuned()
    N = model.config.seq_len
    theta = model.config.rope_theta * theta_multiplier
    params = dict(theta=theta, niah=niah_samples, trials=trials, seqs=posloss_sequences, seed=eval_seed)

    def posloss():
        seqs = ev.heldout_sequences(posloss_sequences, 4 * N)
        return ev.per_position_loss(model, seqs, 4 * N, theta=theta).tolist()

    def niah():
        return ev.niah_eval(model, [N, 2 * N, 4 * N], ev.DEPTHS, niah_samples, theta=theta, seed=eval_seed)

    def topscore():
        return ev.top_needle_score_study(model, trials, 4 * N, theta=theta, seed=eval_seed)

    return {
        "posloss": cached_eval(run, "posloss", params, posloss),
        "niah": cached_eval(run, "niah", params, niah),
        "topscore": cached_eval(run, "topscore", params, topscore),
    }


def niah_accuracy(rows: list[dict], context_size: int) -> float:
    """Mean accuracy over depths at one context size."""
    cells = [r for r in rows if r["context_size"] == context_size]
    return float(sum(r["accuracy"] * r["samples"] for r in cells) / sum(r["samples"] for r in cells))
