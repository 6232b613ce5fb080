"""Dependency-locality probe.

Reveal one masked ground-truth token and measure how far the predictive
distributions at the other masked positions move, as a function of the signed
distance from the revealed position.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .slotting import assemble, partition

MAX_EXACT_DISTANCE = 16


def js_divergence(p, q, atol: float = 1e-6) -> float:
    """Jensen-Shannon divergence in nats; lies in [0, ln 2]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must have the same support")
    for name, d in (("p", p), ("q", q)):
        if (d < 0).any() or abs(d.sum() - 1.0) > atol:
            raise ValueError(f"{name} is not a probability distribution")
    m = 0.5 * (p + q)
    return float(0.5 * _kl(p, m) + 0.5 * _kl(q, m))


def _kl(p, m):
    nz = p > 0
    return np.sum(p[nz] * np.log(p[nz] / m[nz]))


def js_rows(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Row-wise JS divergence for batched distributions ``[..., V]``."""
    m = 0.5 * (p + q)

    def kl(a):
        return torch.where(a > 0, a * (torch.log(a) - torch.log(m)), torch.zeros_like(a)).sum(-1)

    return (0.5 * kl(p) + 0.5 * kl(q)).clamp(0.0, math.log(2))


def distance_bin(d: int) -> int:
    """Exact signed distances up to +-16; everything further shares a tail bin."""
    return max(-MAX_EXACT_DISTANCE - 1, min(MAX_EXACT_DISTANCE + 1, d))


@dataclass
class LocalityCurve:
    t: float
    sums: dict = field(default_factory=lambda: defaultdict(float))
    counts: dict = field(default_factory=lambda: defaultdict(int))
    # raw |distance| sums, kept separately so tail comparisons need no bins
    abs_sums: dict = field(default_factory=lambda: defaultdict(float))
    abs_counts: dict = field(default_factory=lambda: defaultdict(int))

    def add(self, distance: int, js: float):
        b = distance_bin(distance)
        self.sums[b] += js
        self.counts[b] += 1
        self.abs_sums[abs(distance)] += js
        self.abs_counts[abs(distance)] += 1

    @property
    def bins(self) -> dict[int, tuple[float, int]]:
        return {d: (self.sums[d] / self.counts[d], self.counts[d]) for d in sorted(self.counts) if self.counts[d]}

    def mean_at(self, min_abs: int, max_abs: int | None = None) -> float:
        """Mean JS over pairs with min_abs <= |distance| <= max_abs."""
        keys = [d for d in self.abs_counts if d >= min_abs and (max_abs is None or d <= max_abs)]
        n = sum(self.abs_counts[d] for d in keys)
        if not n:
            return float("nan")
        return sum(self.abs_sums[d] for d in keys) / n


def probe_sample(model, prompt, response, t: float, rng: np.random.Generator):
    """Yield ``(signed_distance, js)`` pairs for one corrupted draw.

    Token-level masking: the response is cut into single-token slots and
    floor(t*L) of them are masked. Returns an empty list when fewer than two
    positions are masked.
    """
    cfg = model.cfg
    part = partition(response, 1, pad_id=cfg.pad_id, offset=len(prompt))
    L = part.K
    n_mask = math.floor(t * L)
    if n_mask < 2:
        return []
    order = rng.permutation(L)
    masked = sorted(int(i) for i in order[:n_mask])
    clean = [int(i) for i in order[n_mask:]]
    clean = [clean[i] for i in rng.permutation(len(clean))]
    reveal = masked[int(rng.integers(len(masked)))]

    before = assemble(prompt, part, clean, masked, t, cfg.mask_id, cfg.pad_id)
    rest = [i for i in masked if i != reveal]
    after = assemble(prompt, part, clean + [reveal], rest, t, cfg.mask_id, cfg.pad_id)

    with torch.no_grad():
        toks = torch.stack([before.buffer.tokens, after.buffer.tokens])
        pos = torch.stack([before.buffer.position_ids, after.buffer.position_ids])
        logits, _ = model(toks, pos)
    p_all = torch.softmax(logits.double(), -1)
    # masked rows sit at the tail of each buffer in ascending slot order
    row_before = {i: len(before.buffer) - len(masked) + r for r, i in enumerate(masked)}
    row_after = {i: len(after.buffer) - len(rest) + r for r, i in enumerate(rest)}
    idx_b = torch.as_tensor([row_before[i] for i in rest])
    idx_a = torch.as_tensor([row_after[i] for i in rest])
    js = js_rows(p_all[0, idx_b], p_all[1, idx_a]).tolist()
    return [(i - reveal, v) for i, v in zip(rest, js)]


def dependency_probe(
    model,
    corpus: Sequence[tuple[Sequence[int], Sequence[int]]],
    t_levels: Iterable[float] = (0.3, 0.5, 0.8),
    samples: int = 2000,
    rng: np.random.Generator | None = None,
    max_attempts_factor: int = 20,
) -> list[LocalityCurve]:
    """Run ``samples`` recorded draws per masking ratio. Read-only on the model."""
    rng = rng if rng is not None else np.random.default_rng(0)
    was_training = model.training
    model.eval()
    curves = []
    try:
        for t in t_levels:
            curve = LocalityCurve(float(t))
            done = attempts = 0
            while done < samples:
                attempts += 1
                if attempts > max_attempts_factor * samples:
                    raise RuntimeError(f"could not draw {samples} probe samples at t={t}")
                prompt, response = corpus[int(rng.integers(len(corpus)))]
                pairs = probe_sample(model, prompt, response, t, rng)
                if not pairs:
                    continue
                for d, js in pairs:
                    curve.add(d, js)
                done += 1
            curves.append(curve)
    finally:
        model.train(was_training)
    return curves


def write_curves_csv(curves: Sequence[LocalityCurve], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "signed_distance", "mean_js", "n"])
        for c in curves:
            for d, (mean, n) in c.bins.items():
                w.writerow([c.t, d, f"{mean:.10g}", n])
