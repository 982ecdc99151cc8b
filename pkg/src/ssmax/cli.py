"""``ssmax`` command line: fading curves, training, fine-tuning, evaluation.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

import ssmax
from ssmax import checkpoint as ckpt_io
from ssmax import eval as ev
from ssmax import kernels
from ssmax.config import ConfigError, ExperimentConfig, load_config
from ssmax.training import (
    VARIANT_MODES,
    DatasetError,
    NumericAbort,
    generate_sft_dataset,
    run_pretraining,
    run_sft,
)

log = logging.getLogger("ssmax")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
PROTOCOLS = ("posloss", "niah", "needlescore", "topscore", "fitpn")


class UsageError(Exception):
    pass


# -- output helpers ----------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    _atomic_write(Path(path), buf.getvalue())


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{ssmax.__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return ssmax.__version__


def write_manifest(out_dir: Path, command: str, config: dict, seed, outputs: list, started: float) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": version_string(),
        "outputs": [str(p) for p in outputs],
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    path = Path(out_dir) / "manifest.json"
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _parse_range(text: str) -> np.ndarray:
    """``start:stop:count`` inclusive linspace."""
    try:
        start, stop, count = text.split(":")
        return np.linspace(float(start), float(stop), int(count))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected start:stop:count, got {text!r}")


# -- commands ----------------------------------------------------------------


def cmd_fading_curve(args) -> int:
    started = time.time()
    if args.pattern == "fig1" and args.zmax_range is not None:
        raise UsageError("--zmax-range only applies to --pattern fig3")
    rows = kernels.fading_curve(args.pattern, args.sizes, s=args.s, z_max_values=args.zmax_range)
    out = Path(args.out)
    if args.pattern == "fig1":
        write_csv(out, ["n", "softmax", "ssmax"], ((r["n"], r["softmax"], r["ssmax"]) for r in rows))
    else:
        write_csv(out, ["n", "s", "z_max", "softmax", "ssmax"], ((r["n"], r["s"], r["z_max"], r["softmax"], r["ssmax"]) for r in rows))
    config = {"pattern": args.pattern, "sizes": args.sizes, "s": args.s}
    if args.zmax_range is not None:
        config["zmax"] = [float(args.zmax_range[0]), float(args.zmax_range[-1]), len(args.zmax_range)]
    write_manifest(out.parent, "fading-curve", config, None, [out], started)
    return EXIT_OK


def _write_train_outputs(out: Path, model, state, step, records, meta) -> list[Path]:
    ckpt_path = out / "checkpoint.ckpt"
    ckpt_io.save(ckpt_io.Checkpoint.from_model(model, state, step, meta), ckpt_path)
    loss_path = out / "loss.csv"
    write_csv(loss_path, ["step", "loss", "lr", "variant"], ((r["step"], r["loss"], r["lr"], r["variant"]) for r in records))
    return [ckpt_path, loss_path]


def _load_experiment(path) -> ExperimentConfig:
    return load_config(path) if path else ExperimentConfig()


def cmd_train(args) -> int:
    started = time.time()
    cfg = _load_experiment(args.config)
    if args.steps is not None:
        cfg.train = dataclasses.replace(cfg.train, total_steps=args.steps, warmup_steps=min(cfg.train.warmup_steps, args.steps))
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    plan = cfg.plan(args.variant)
    out = Path(args.out)
    records = []
    on_step = (lambda r: r["step"] % args.log_every == 0 and log.info("step %d loss %.4f lr %.2e", r["step"], r["loss"], r["lr"])) if args.log_every else None
    meta = {"variant": args.variant, "plan": plan.describe(cfg.train.total_steps), "stage": "pretrain"}
    try:
        result = run_pretraining(cfg.model, cfg.train, plan, on_step=on_step)
    except NumericAbort as exc:
        log.error("%s; writing last good checkpoint", exc)
        if exc.model is not None:
            meta["aborted"] = str(exc)
            outputs = _write_train_outputs(out, exc.model, exc.state or {}, (exc.step or 1) - 1, records, meta)
            write_manifest(out, "train", {**cfg.as_dict(), "plan": meta["plan"]}, cfg.train.seed, outputs, started)
        return EXIT_NUMERIC
    outputs = _write_train_outputs(out, result.model, result.state, result.step, result.records, meta)
    write_manifest(out, "train", {**cfg.as_dict(), "variant": args.variant, "plan": result.plan}, cfg.train.seed, outputs, started)
    return EXIT_OK


def cmd_sft(args) -> int:
    started = time.time()
    cfg = _load_experiment(args.config)
    source = ckpt_io.load(args.checkpoint)
    model = source.build_model()
    rng = np.random.default_rng([cfg.sft.seed, 99])
    rows = generate_sft_dataset(rng, cfg.sft_rows, cfg.sft.seq_len)
    out = Path(args.out)
    try:
        result = run_sft(model, rows, cfg.sft)
    except NumericAbort as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    meta = dict(source.meta, stage="sft", source=str(args.checkpoint))
    outputs = _write_train_outputs(out, result.model, result.state, result.step, result.records, meta)
    write_manifest(out, "sft", cfg.as_dict(), cfg.sft.seed, outputs, started)
    return EXIT_OK


def load_model(path):
    """Checkpoint -> model; patched in tests to evaluate stub models."""
    return ckpt_io.load(path).build_model()


def cmd_eval(args) -> int:
    started = time.time()
    model = load_model(args.checkpoint)
    before = ev.model_fingerprint(model)
    cfg = model.config
    N = cfg.seq_len
    theta = cfg.rope_theta * args.theta_multiplier
    out = Path(args.out)
    outputs = []
    summary: dict = {"protocol": args.protocol, "theta": theta, "model_config": dataclasses.asdict(cfg)}

    if args.protocol == "posloss":
        max_len = args.max_len or 4 * N
        seqs = ev.heldout_sequences(args.samples or 32, max_len, seed=args.seed)
        losses = ev.per_position_loss(model, seqs, max_len, theta=theta)
        path = out / "posloss.csv"
        write_csv(path, ["position", "loss"], ((i + 1, float(v)) for i, v in enumerate(losses)))
        outputs.append(path)
        summary["mean_loss"] = float(losses.mean())
    elif args.protocol == "niah":
        sizes = args.sizes or [N, 2 * N, 4 * N]
        rows = ev.niah_eval(model, sizes, ev.DEPTHS, args.samples or 100, theta=theta, seed=args.seed)
        path = out / "niah.csv"
        write_csv(path, ["context_size", "depth", "accuracy"], ((r["context_size"], r["depth"], r["accuracy"]) for r in rows))
        outputs.append(path)
        summary["cells"] = rows
    elif args.protocol == "needlescore":
        size = (args.sizes or [4 * N])[0]
        sample = ev.generate_niah(size, 0.5, ev.sample_rng(args.seed, size, 0.5, 0))
        view = ev.set_rope_theta(model, theta)
        texts, traces = ev.run_niah_samples(view, [sample], capture=True)
        ranked = ev.ranked_scores(ev.needle_score(traces[0], sample.span))
        path = out / "needlescore.csv"
        write_csv(path, ["rank", "layer", "head", "score"], ((i + 1, l, h, s) for i, ((l, h), s) in enumerate(ranked)))
        outputs.append(path)
        summary.update(answer=sample.number, generated=texts[0], outcome=ev.grade(texts[0], sample.number))
    elif args.protocol == "topscore":
        size = (args.sizes or [4 * N])[0]
        rows = ev.top_needle_score_study(model, args.trials, size, theta=theta, seed=args.seed)
        path = out / "topscore.csv"
        write_csv(path, ["rank", "score", "outcome"], ((r["rank"], r["score"], r["outcome"]) for r in rows))
        outputs.append(path)
        summary["median_top_score"] = ev.median(r["score"] for r in rows)
    elif args.protocol == "fitpn":
        pn = getattr(model, "pn", None)
        if pn is None:
            raise DatasetError("fitpn needs a checkpoint trained in pn_probe mode")
        values = pn.detach().double().numpy()
        a1, a2, r2 = ev.fit_pn(values)
        path = out / "fitpn.csv"
        write_csv(path, ["a1", "a2", "r2"], [(a1, a2, r2)])
        table = out / "pn.csv"
        write_csv(table, ["n", "p_n"], ((i + 1, float(v)) for i, v in enumerate(values)))
        outputs += [path, table]
        summary.update(a1=a1, a2=a2, r2=r2)

    if ev.model_fingerprint(model) != before:
        raise RuntimeError("evaluation modified the model weights")
    summary_path = out / "summary.json"
    _atomic_write(summary_path, json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    outputs.append(summary_path)
    write_manifest(out, "eval", {**vars(args), "func": None}, args.seed, outputs, started)
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssmax", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fading-curve", help="max-output curves of softmax vs ssmax")
    f.add_argument("--pattern", choices=("fig1", "fig3"), required=True)
    f.add_argument("--sizes", type=_parse_ints, required=True)
    f.add_argument("--s", type=float, default=None, help="scaling parameter (fig1 default 0.43, fig3 default 1)")
    f.add_argument("--zmax-range", type=_parse_range, default=None, help="start:stop:count for fig3")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fading_curve)

    t = sub.add_parser("train", help="pretrain one variant")
    t.add_argument("--config", default=None, help="INI config file")
    t.add_argument("--variant", choices=sorted(VARIANT_MODES), required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None, help="override [train] total_steps")
    t.add_argument("--seed", type=int, default=None, help="override [train] seed")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sft", help="fine-tune a checkpoint on generated retrieval QA")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sft)

    e = sub.add_parser("eval", help="run an evaluation protocol")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--protocol", choices=PROTOCOLS, required=True)
    e.add_argument("--theta-multiplier", type=float, default=50.0)
    e.add_argument("--out", required=True)
    e.add_argument("--sizes", type=_parse_ints, default=None, help="context sizes (default N,2N,4N; 4N for score studies)")
    e.add_argument("--samples", type=int, default=None, help="samples per NIAH cell / sequences for posloss")
    e.add_argument("--trials", type=int, default=50)
    e.add_argument("--max-len", type=int, default=None)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ssmax: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ckpt_io.CheckpointError, ConfigError, DatasetError, ev.EvalRangeError, ev.EvalDomainError, kernels.KernelRangeError, kernels.KernelDomainError, FileNotFoundError) as exc:
        print(f"ssmax: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"ssmax: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
