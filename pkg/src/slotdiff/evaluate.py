"""Exact-match evaluation, TPF accounting and hyperparameter sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .decoder import DecodeConfig, DecodeResult, decode


@dataclass
class EvalReport:
    preset: DecodeConfig
    accuracy: float
    correct: list[bool]
    responses: list[list[int]]
    forwards: list[int]
    tokens: list[int]
    seconds: float
    traces: list = field(default_factory=list, repr=False)

    @property
    def per_prompt_tpf(self) -> list[float]:
        return [t / f if f else 0.0 for t, f in zip(self.tokens, self.forwards)]

    @property
    def tpf(self) -> float:
        return sum(self.tokens) / sum(self.forwards) if sum(self.forwards) else 0.0

    @property
    def tokens_per_second(self) -> float:
        return sum(self.tokens) / self.seconds if self.seconds > 0 else 0.0


def evaluate(model, samples: Sequence[dict], cfg: DecodeConfig, keep_traces: bool = False) -> EvalReport:
    """Decode every prompt (batch size 1) and score exact match against its response."""
    correct, responses, forwards, tokens, traces = [], [], [], [], []
    t0 = time.perf_counter()
    for s in samples:
        res: DecodeResult = decode(model, s["prompt"], cfg)
        responses.append(res.response)
        correct.append(res.response == list(s["response"]))
        forwards.append(res.trace.forwards)
        tokens.append(res.trace.tokens_total)
        if keep_traces:
            traces.append(res.trace)
    secs = time.perf_counter() - t0
    acc = sum(correct) / len(correct) if correct else 0.0
    return EvalReport(cfg, acc, correct, responses, forwards, tokens, secs, traces)


def recompute_accuracy(responses: Sequence[Sequence[int]], samples: Sequence[dict]) -> float:
    hits = sum(list(r) == list(s["response"]) for r, s in zip(responses, samples))
    return hits / len(samples) if samples else 0.0


def sweep(
    model,
    samples: Sequence[dict],
    base: DecodeConfig,
    tau_slot: Iterable[float] = (0.6,),
    tau_token: Iterable[float] = (0.3,),
    k: Iterable[int] = (4,),
    b: Iterable[int] = (16,),
) -> list[dict]:
    """Grid over decode hyperparameters; skips cells with k not dividing b."""
    rows = []
    for ts, tt, kk, bb in itertools.product(tau_slot, tau_token, k, b):
        if bb < kk or bb % kk or base.max_len % bb:
            continue
        cfg = replace(base, tau_slot=ts, tau_token=tt, k=kk, b=bb)
        rep = evaluate(model, samples, cfg)
        rows.append(
            {
                "tau_slot": ts,
                "tau_token": tt,
                "k": kk,
                "b": bb,
                "accuracy": rep.accuracy,
                "tpf": rep.tpf,
                "forwards": sum(rep.forwards),
                "tokens": sum(rep.tokens),
                "tokens_per_sec": rep.tokens_per_second,
            }
        )
    return rows


def rows_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
