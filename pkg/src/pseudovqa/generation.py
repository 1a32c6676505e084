"""Decoding: greedy for VQA answers, nucleus sampling for pseudo-QA synthesis.

Greedy decoding is a pure function of (params, visual, prompt). Nucleus
synthesis derives one RNG per (seed, visual index, sample index), so serial,
batched, and parallel runs over the unlabeled set produce identical datasets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import PseudoExample, PseudoSource, UnlabeledExample
from .model import ParameterStore, VisualInput, forward
from .vocab import BOS, EOS, PAD, QAParseError, Vocabulary, parse_qa_output

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "nucleus"  # "greedy" | "nucleus" (greedy ignores top_p/temperature/seed)
    top_p: float = 0.9
    temperature: float = 1.0
    max_new_tokens: int = 48
    samples_per_visual: int = 3
    rng_seed: int = 0
    # EOS/PAD are kept out of the nucleus until this many tokens were emitted
    min_tokens: int = 3

    def __post_init__(self):
        if self.mode not in ("greedy", "nucleus"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.samples_per_visual < 1:
            raise ValueError("samples_per_visual must be >= 1")

    def to_json(self) -> dict:
        from dataclasses import asdict

        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "DecodeConfig":
        return cls(**obj)


def _max_new(params: ParameterStore, prompt_len: int, requested: int) -> int:
    room = params.config.max_text_len - prompt_len
    if room < 0:
        raise ValueError(f"prompt of {prompt_len} tokens exceeds the model's text window")
    return min(requested, room)


def greedy_decode(params: ParameterStore, visual: VisualInput, prompt_ids,
                  max_new_tokens: int, eos_id: int = EOS) -> list[int]:
    """Append argmax tokens (ties to the lowest id) until EOS or the budget
    runs out; returns only the newly generated ids, EOS included if reached."""
    ids = list(prompt_ids)
    out: list[int] = []
    for _ in range(_max_new(params, len(ids), max_new_tokens)):
        logits = forward(params, visual, ids).data
        nxt = int(np.argmax(logits[-1]))
        out.append(nxt)
        ids.append(nxt)
        if nxt == eos_id:
            break
    return out


def nucleus_sample(probs: np.ndarray, top_p: float, rng: np.random.Generator) -> int:
    """Sample from the smallest descending-probability prefix whose cumulative
    mass reaches top_p (probability ties enter by lowest id), renormalized."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError(f"probabilities must be 1-D, got shape {probs.shape}")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError("probabilities must be non-negative and sum to 1")
    if not (0.0 < top_p <= 1.0):
        raise ValueError(f"top_p must be in (0, 1], got {top_p}")
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    above = np.nonzero(csum >= top_p)[0]
    k = int(above[0]) + 1 if above.size else len(order)
    nucleus = order[:k]
    weights = probs[nucleus]
    weights = weights / weights.sum()
    j = int(np.searchsorted(np.cumsum(weights), rng.random(), side="right"))
    return int(nucleus[min(j, k - 1)])


def nucleus_set(probs: np.ndarray, top_p: float) -> set[int]:
    """The analytic nucleus for a distribution (oracle/test hook)."""
    order = np.argsort(-np.asarray(probs, dtype=np.float64), kind="stable")
    csum = np.cumsum(probs[order])
    above = np.nonzero(csum >= top_p)[0]
    k = int(above[0]) + 1 if above.size else len(order)
    return {int(i) for i in order[:k]}


def _softmax(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    e = np.exp(shifted)
    return e / e.sum()


def nucleus_decode(params: ParameterStore, visual: VisualInput, prompt_ids,
                   cfg: DecodeConfig, rng: np.random.Generator,
                   trace: list | None = None) -> list[int]:
    """Sample a continuation token by token; returns generated ids, EOS
    included if reached. With ``trace`` given, appends (nucleus_set, chosen)
    per step for auditing."""
    ids = list(prompt_ids)
    out: list[int] = []
    for _ in range(_max_new(params, len(ids), cfg.max_new_tokens)):
        logits = forward(params, visual, ids).data[-1].astype(np.float64)
        probs = _softmax(logits / cfg.temperature)
        if len(out) < cfg.min_tokens:
            clipped = probs.copy()
            clipped[EOS] = 0.0
            clipped[PAD] = 0.0
            total = clipped.sum()
            if total > 1e-12:
                probs = clipped / total
        nxt = nucleus_sample(probs, cfg.top_p, rng)
        if trace is not None:
            trace.append((nucleus_set(probs, cfg.top_p), nxt))
        out.append(nxt)
        ids.append(nxt)
        if nxt == EOS:
            break
    return out


SYNTH_CHUNK = 64  # sequences decoded in lockstep; fixed so runs are reproducible


def _nucleus_step(logits_row: np.ndarray, emitted: int, cfg: DecodeConfig,
                  rng: np.random.Generator) -> int:
    probs = _softmax(logits_row.astype(np.float64) / cfg.temperature)
    if emitted < cfg.min_tokens:
        clipped = probs.copy()
        clipped[EOS] = 0.0
        clipped[PAD] = 0.0
        total = clipped.sum()
        if total > 1e-12:
            probs = clipped / total
    return nucleus_sample(probs, cfg.top_p, rng)


def _batched_nucleus_jobs(params: ParameterStore, jobs, cfg: DecodeConfig) -> list[list[int]]:
    """Decode (visual, rng) jobs from [BOS] in fixed-size lockstep chunks; each
    job draws only from its own rng, so chunking cannot change its output."""
    from .inference import IncrementalDecoder

    results: list[list[int]] = []
    for lo in range(0, len(jobs), SYNTH_CHUNK):
        sub = jobs[lo : lo + SYNTH_CHUNK]
        dec = IncrementalDecoder(params, [visual for visual, _ in sub])
        logits = dec.feed_tokens([BOS] * len(sub))
        outs: list[list[int]] = [[] for _ in sub]
        done = [False] * len(sub)
        budget = min(cfg.max_new_tokens, dec.positions_left)
        for step in range(budget):
            nxt = []
            for i, (_, rng) in enumerate(sub):
                if done[i]:
                    nxt.append(PAD)
                    continue
                tok = _nucleus_step(logits[i], len(outs[i]), cfg, rng)
                outs[i].append(tok)
                if tok == EOS:
                    done[i] = True
                nxt.append(tok)
            if all(done) or step == budget - 1:
                break
            logits = dec.feed_tokens(nxt)
        results.extend(outs)
    return results


def synthesize_pseudo_dataset(params: ParameterStore, unlabeled, cfg: DecodeConfig,
                              vocab: Vocabulary, run_id: str = "run0"
                              ) -> tuple[list[PseudoExample], dict]:
    """Sample QA pairs for every unlabeled visual, keeping only strictly
    parseable, per-visual-unique pairs. Returns the dataset plus a synthesis
    report (parse-failure reasons, dedup rate, per-visual yield).

    Every (visual, sample) draw owns an RNG derived from (rng_seed, visual
    index, sample index), so the result is independent of how draws are
    batched or parallelized."""
    if cfg.mode != "nucleus":
        raise ValueError("pseudo-dataset synthesis requires nucleus decoding")
    unlabeled = list(unlabeled)
    visuals = [ex.visual if isinstance(ex, UnlabeledExample) else ex for ex in unlabeled]
    jobs = [
        (visuals[vi], np.random.default_rng([cfg.rng_seed, vi, s]))
        for vi in range(len(unlabeled))
        for s in range(cfg.samples_per_visual)
    ]
    decoded = _batched_nucleus_jobs(params, jobs, cfg)

    out: list[PseudoExample] = []
    failures: dict[str, int] = {}
    n_dup = 0
    n_truncated = 0
    yields: list[int] = []
    for vi in range(len(unlabeled)):
        seen: set[tuple[str, str]] = set()
        kept = 0
        for s in range(cfg.samples_per_visual):
            ids = decoded[vi * cfg.samples_per_visual + s]
            if not ids or ids[-1] != EOS:
                n_truncated += 1
            text = vocab.decode(ids)
            try:
                q, a = parse_qa_output(text)
            except QAParseError as err:
                failures[err.reason] = failures.get(err.reason, 0) + 1
                continue
            if (q, a) in seen:
                n_dup += 1
                continue
            seen.add((q, a))
            out.append(PseudoExample(visuals[vi], q, a,
                                     PseudoSource(run_id, vi * cfg.samples_per_visual + s)))
            kept += 1
        yields.append(kept)
    n_draws = len(unlabeled) * cfg.samples_per_visual
    n_failed = sum(failures.values())
    report = {
        "run": run_id,
        "visuals": len(unlabeled),
        "samples_per_visual": cfg.samples_per_visual,
        "draws": n_draws,
        "parse_failures": dict(sorted(failures.items())),
        "parse_failure_rate": n_failed / n_draws if n_draws else 0.0,
        "duplicates": n_dup,
        "dedup_rate": n_dup / n_draws if n_draws else 0.0,
        "truncated": n_truncated,
        "emitted": len(out),
        "mean_yield_per_visual": float(np.mean(yields)) if yields else 0.0,
        "decode": cfg.to_json(),
    }
    if unlabeled and not out:
        log.warning("pseudo-dataset synthesis produced ZERO examples (%d draws, "
                    "failure rate %.2f); downstream fine-tuning will be labeled-only",
                    n_draws, report["parse_failure_rate"])
    return out, report
