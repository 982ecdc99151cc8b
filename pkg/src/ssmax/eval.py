"""Measurement protocols: per-position loss, needle retrieval, needle scores,
and the logarithmic fit of a learned per-length table."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ssmax import data
from ssmax.model import Transformer, lm_loss, set_rope_theta

DEPTHS = (0.1, 0.3, 0.5, 0.7, 0.9)
MAX_ANSWER_TOKENS = 8
OUTCOMES = ("correct", "first-digit-only", "incorrect")


class EvalDomainError(ValueError):
    pass


class EvalRangeError(ValueError):
    pass


def model_fingerprint(model: torch.nn.Module) -> str:
    """SHA-256 over every named tensor; used to show evaluation never mutates weights."""
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _with_theta(model: Transformer, theta: float | None) -> Transformer:
    return model if theta is None else set_rope_theta(model, theta)


# -- per-position loss ---------------------------------------------------------


def heldout_sequences(num: int, length: int, seed: int = 12345, kv_fraction: float = 0.5, copy_fraction: float = 0.3) -> np.ndarray:
    """``num`` held-out corpus sequences of ``length + 1`` tokens."""
    rng = np.random.default_rng([seed, length])
    return data.corpus_batch(rng, num, length + 1, kv_fraction, copy_fraction)


@torch.no_grad()
def per_position_loss(model: Transformer, sequences, max_len: int, theta: float | None = None, batch_size: int = 8) -> np.ndarray:
    """Mean next-token loss at each of the first ``max_len`` positions."""
    sequences = np.asarray(sequences)
    if sequences.ndim != 2 or sequences.shape[1] < max_len + 1:
        raise EvalRangeError(f"need sequences of at least {max_len + 1} tokens, got shape {sequences.shape}")
    view = _with_theta(model, theta)
    view.eval()
    total = np.zeros(max_len)
    for i in range(0, len(sequences), batch_size):
        chunk = torch.from_numpy(sequences[i : i + batch_size, : max_len + 1])
        _, per_pos = lm_loss(view(chunk[:, :-1]), chunk[:, 1:])
        total += per_pos.double().sum(0).numpy()
    return total / len(sequences)


# -- needle in a haystack ------------------------------------------------------


@dataclass
class NeedleSample:
    """A prompt of exactly ``context_size`` tokens ending in the question.

    ``span`` is the half-open token interval from right after the needle's
    colon through its final period.
    """

    tokens: np.ndarray
    city: str
    number: str
    depth: float
    span: tuple[int, int]
    context_size: int = field(init=False)

    def __post_init__(self):
        self.context_size = len(self.tokens)
        if len(self.number) != data.ANSWER_DIGITS or not self.number.isdigit():
            raise EvalDomainError(f"answer must be {data.ANSWER_DIGITS} digits")
        if not 0 <= self.span[0] < self.span[1] <= self.context_size:
            raise EvalDomainError("needle span lies outside the context")


def generate_niah(context_size: int, depth: float, rng: np.random.Generator, language=None) -> NeedleSample:
    """Filler with one needle, followed by the question; ``context_size`` tokens total.

    The span starts at the feasible index nearest ``depth * context_size``.
    """
    language = language or data.default_language()
    city = data.CITIES[int(rng.integers(len(data.CITIES)))]
    number = data.random_number(rng)
    needle = data.needle_text(city, number)
    question = data.question_text(city)
    offset = data.needle_span_offset(city)
    # layout: filler[:before] + " " + needle + " " + filler[before:] + question
    room = context_size - len(needle) - 2 - len(question)
    if room < 0:
        raise EvalRangeError(f"context size {context_size} cannot hold the needle and the question")
    target = int(round(depth * context_size))
    before = min(max(target - 1 - offset, 0), room)
    filler = language.sample_text(rng, room)
    text = filler[:before] + " " + needle + " " + filler[before:] + question
    tokens = np.frombuffer(text.encode("ascii"), dtype=np.uint8).astype(np.int64)
    span_start = before + 1 + offset
    return NeedleSample(tokens, city, number, depth, (span_start, span_start + len(needle) - offset))


# stream tag for the top-score study; depth tags are round(depth * 1000) <= 1000
_STUDY_STREAM = 10_000


def sample_rng(seed: int, context_size: int, depth: float, trial: int) -> np.random.Generator:
    """Per-cell stream so that cells can be evaluated in any order or in parallel."""
    return np.random.default_rng([seed, context_size, int(round(depth * 1000)), trial])


@torch.no_grad()
def greedy_generate(model, prompts: torch.Tensor, max_new_tokens: int = MAX_ANSWER_TOKENS, trace: list | None = None) -> torch.Tensor:
    """Greedy decoding that never emits EOS. ``prompts`` is ``(B, T)``.

    When ``trace`` is a list, the attention of the first decoding step is
    captured into it (one ``(B, H, T)`` tensor per layer).
    """
    x = prompts
    out = []
    for i in range(max_new_tokens):
        logits = model(x, trace=trace if i == 0 else None)[:, -1].clone()
        logits[:, data.EOS] = float("-inf")
        nxt = logits.argmax(-1)
        out.append(nxt)
        x = torch.cat([x, nxt[:, None]], dim=1)
    return torch.stack(out, dim=1)


def grade(generated: str, number: str) -> str:
    answer = generated[: data.ANSWER_DIGITS]
    if answer == number:
        return "correct"
    if answer[:1] == number[:1]:
        return "first-digit-only"
    return "incorrect"


@torch.no_grad()
def run_niah_samples(model, samples: list[NeedleSample], batch_size: int = 16, capture: bool = False):
    """Decode every sample; returns ``(generated texts, traces)``.

    ``traces[i]`` is a ``(layers, heads, T)`` array of the first-step
    attention row when ``capture`` is set.
    """
    texts, traces = [], []
    model.eval()
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        lengths = {s.context_size for s in chunk}
        if len(lengths) != 1:
            raise EvalDomainError("samples in one batch must share a context size")
        prompts = torch.from_numpy(np.stack([s.tokens for s in chunk]))
        trace = [] if capture else None
        gen = greedy_generate(model, prompts, trace=trace)
        texts += [data.decode(row.tolist()) for row in gen]
        if capture:
            stacked = torch.stack(trace, dim=1)  # (B, L, H, T)
            traces += [t.float().numpy() for t in stacked]
    return texts, traces


def niah_eval(
    model: Transformer,
    sizes,
    depths=DEPTHS,
    samples_per_cell: int = 100,
    theta: float | None = None,
    seed: int = 0,
    batch_size: int = 16,
) -> list[dict]:
    """Exact-match retrieval accuracy for every (context size, depth) cell."""
    view = _with_theta(model, theta)
    rows = []
    for size in sizes:
        for depth in depths:
            samples = [generate_niah(size, depth, sample_rng(seed, size, depth, t)) for t in range(samples_per_cell)]
            texts, _ = run_niah_samples(view, samples, batch_size)
            tags = [grade(t, s.number) for t, s in zip(texts, samples)]
            rows.append(
                {
                    "context_size": int(size),
                    "depth": float(depth),
                    "accuracy": tags.count("correct") / max(len(tags), 1),
                    "first_digit": (tags.count("correct") + tags.count("first-digit-only")) / max(len(tags), 1),
                    "samples": len(tags),
                }
            )
    return rows


# -- needle score --------------------------------------------------------------


def needle_score(trace, span: tuple[int, int]) -> dict[tuple[int, int], float]:
    """Attention mass each (layer, head) puts on the needle span.

    ``trace`` is indexable as ``trace[layer][head]`` -> attention row over the
    visible tokens at the first answer step.
    """
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim != 3:
        raise EvalDomainError("trace must have shape (layers, heads, tokens)")
    start, end = span
    if not 0 <= start < end <= trace.shape[-1]:
        raise EvalDomainError(f"span {span} outside trace width {trace.shape[-1]}")
    scores = trace[:, :, start:end].sum(-1)
    return {(l, h): float(scores[l, h]) for l in range(scores.shape[0]) for h in range(scores.shape[1])}


def ranked_scores(scores: dict) -> list[tuple[tuple[int, int], float]]:
    """Heads sorted by needle score, highest first."""
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


def top_needle_score_study(
    model: Transformer,
    trials: int,
    context_size: int,
    theta: float | None = None,
    seed: int = 0,
    batch_size: int = 16,
) -> list[dict]:
    """Per trial: random needle/depth, greedy retrieval, and the largest needle
    score over all heads. Returned sorted by score, highest first, with ranks."""
    if trials <= 0:
        return []
    view = _with_theta(model, theta)
    samples = []
    for t in range(trials):
        rng = np.random.default_rng([seed, context_size, _STUDY_STREAM, t])
        depth = float(rng.uniform(0.1, 0.9))
        samples.append(generate_niah(context_size, depth, rng))
    texts, traces = run_niah_samples(view, samples, batch_size, capture=True)
    out = []
    for sample, text, trace in zip(samples, texts, traces):
        best = ranked_scores(needle_score(trace, sample.span))[0]
        out.append(
            {
                "score": best[1],
                "layer": best[0][0],
                "head": best[0][1],
                "outcome": grade(text, sample.number),
                "depth": sample.depth,
                "answer": sample.number,
                "generated": text,
            }
        )
    out.sort(key=lambda r: -r["score"])
    for rank, row in enumerate(out, start=1):
        row["rank"] = rank
    return out


# -- p_n fit -------------------------------------------------------------------


def fit_pn(pn) -> tuple[float, float, float]:
    """Least-squares fit ``p_n ~ a1 * ln n + a2`` over ``n = 1..len(pn)``.

    Returns ``(a1, a2, r2)``; ``r2`` is 0 when the table has no variance.
    """
    pn = np.asarray(pn, dtype=np.float64)
    if pn.ndim != 1 or pn.size < 3:
        raise EvalDomainError("need a table of at least 3 entries")
    x = np.log(np.arange(1, pn.size + 1, dtype=np.float64))
    design = np.stack([x, np.ones_like(x)], axis=1)
    (a1, a2), *_ = np.linalg.lstsq(design, pn, rcond=None)
    resid = pn - (a1 * x + a2)
    if np.all(pn == pn[0]):
        return 0.0, float(pn[0]), 0.0
    ss_tot = float(np.sum((pn - pn.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot
    return float(a1), float(a2), r2


def median(values) -> float:
    values = list(values)
    return float(np.median(values)) if values else math.nan
