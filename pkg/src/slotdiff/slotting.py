"""Slot partitioning, training-time corruption and masking-pattern counts."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backbone import TokenBuffer

SCHEMES = ("full-MDM", "block", "slot")


class SlotIntegrityError(ValueError):
    pass


class PatternSizeError(ValueError):
    pass


@dataclass(frozen=True)
class SlotPartition:
    """A response cut into K slots of exactly k tokens each.

    ``origins[i]`` is the ground-truth position of slot i's first token
    (``offset + i*k``, where offset is the prompt length).
    """

    k: int
    slots: tuple[tuple[int, ...], ...]
    pad_count: int
    origins: tuple[int, ...]

    @property
    def K(self) -> int:
        return len(self.slots)

    def tokens(self) -> list[int]:
        out = [t for s in self.slots for t in s]
        return out[: len(out) - self.pad_count]


def partition(response: Sequence[int], k: int, pad_id: int = 0, offset: int = 0) -> SlotPartition:
    if k < 1:
        raise ValueError(f"slot size must be >= 1, got {k}")
    if len(response) == 0:
        raise ValueError("cannot partition an empty response")
    K = -(-len(response) // k)
    pad_count = K * k - len(response)
    padded = list(response) + [pad_id] * pad_count
    slots = tuple(tuple(padded[i * k : (i + 1) * k]) for i in range(K))
    origins = tuple(offset + i * k for i in range(K))
    return SlotPartition(k, slots, pad_count, origins)


@dataclass
class TrainingInstance:
    """A corrupted training sequence: prompt ++ permuted clean slots ++ masked slots.

    ``arm_rows``/``arm_targets``: logits row r must predict the token at r+1
    (next token inside a clean slot). ``mdm_rows``/``mdm_targets``: a mask
    placeholder at row r must predict its own ground-truth token. Pad targets
    are never listed.
    """

    prompt: tuple[int, ...]
    k: int
    t: float
    clean: list[tuple[tuple[int, ...], int]]
    masked: list[tuple[tuple[int, ...], int]]
    masked_truth: list[tuple[int, ...]]
    buffer: TokenBuffer
    arm_rows: np.ndarray
    arm_targets: np.ndarray
    mdm_rows: np.ndarray
    mdm_targets: np.ndarray

    @property
    def n_clean(self) -> int:
        return len(self.clean)

    @property
    def n_masked(self) -> int:
        return len(self.masked)


def assemble(
    prompt: Sequence[int],
    part: SlotPartition,
    clean_order: Sequence[int],
    masked_idx: Sequence[int],
    t: float,
    mask_id: int,
    pad_id: int,
) -> TrainingInstance:
    """Lay out prompt ++ clean slots (given order) ++ masked slots (ascending)."""
    k = part.k
    masked_idx = sorted(masked_idx)
    tokens = list(prompt)
    pos = list(range(len(prompt)))
    arm_rows, arm_tg, mdm_rows, mdm_tg = [], [], [], []
    clean = []
    for i in clean_order:
        slot, origin = part.slots[i], part.origins[i]
        start = len(tokens)
        tokens.extend(slot)
        pos.extend(range(origin, origin + k))
        clean.append((slot, origin))
        for j in range(1, k):
            if _is_real(part, i, j):
                arm_rows.append(start + j - 1)
                arm_tg.append(slot[j])
    masked, truth = [], []
    for i in masked_idx:
        slot, origin = part.slots[i], part.origins[i]
        start = len(tokens)
        tokens.extend([mask_id] * k)
        pos.extend(range(origin, origin + k))
        masked.append(((mask_id,) * k, origin))
        truth.append(slot)
        for j in range(k):
            if _is_real(part, i, j):
                mdm_rows.append(start + j)
                mdm_tg.append(slot[j])
    return TrainingInstance(
        prompt=tuple(prompt),
        k=k,
        t=t,
        clean=clean,
        masked=masked,
        masked_truth=truth,
        buffer=TokenBuffer(tokens, pos),
        arm_rows=np.asarray(arm_rows, dtype=np.int64),
        arm_targets=np.asarray(arm_tg, dtype=np.int64),
        mdm_rows=np.asarray(mdm_rows, dtype=np.int64),
        mdm_targets=np.asarray(mdm_tg, dtype=np.int64),
    )


def _is_real(part: SlotPartition, i: int, j: int) -> bool:
    # padding only ever sits at the tail of the final slot
    return i * part.k + j < part.K * part.k - part.pad_count


def corrupt(
    prompt: Sequence[int],
    part: SlotPartition,
    t: float,
    rng: np.random.Generator,
    mask_id: int = 1,
    pad_id: int = 0,
) -> TrainingInstance:
    """Mask floor(t*K) slots chosen uniformly, shuffle the clean ones, reorder."""
    if not 0.0 <= t < 1.0:
        raise ValueError(f"masking ratio must be in [0, 1), got {t}")
    K = part.K
    n_mask = math.floor(t * K)
    order = rng.permutation(K)
    masked_idx = sorted(int(i) for i in order[:n_mask])
    clean_idx = [int(i) for i in order[n_mask:]]
    clean_order = [clean_idx[i] for i in rng.permutation(len(clean_idx))]
    return assemble(prompt, part, clean_order, masked_idx, t, mask_id, pad_id)


def sample_instance(
    prompt: Sequence[int],
    response: Sequence[int],
    slot_sizes: Sequence[int],
    rng: np.random.Generator,
    mask_id: int = 1,
    pad_id: int = 0,
) -> TrainingInstance:
    """Draw k from ``slot_sizes`` (capped at the response length) and t ~ U[0,1)."""
    k = min(int(rng.choice(slot_sizes)), len(response))
    t = float(rng.random())
    part = partition(response, k, pad_id=pad_id, offset=len(prompt))
    return corrupt(prompt, part, t, rng, mask_id=mask_id, pad_id=pad_id)


def restore_order(slots: Sequence[tuple[Sequence[int], int]]) -> list[int]:
    """Concatenate ``(tokens, origin)`` pairs sorted by origin."""
    origins = [o for _, o in slots]
    if len(set(origins)) != len(origins):
        raise SlotIntegrityError(f"duplicate slot origins: {sorted(origins)}")
    return [tok for s, _ in sorted(slots, key=lambda p: p[1]) for tok in s]


def truncate_at_eos(tokens: Sequence[int], eos_id: int) -> list[int]:
    """Cut after the first EOS (inclusive); unchanged when there is none."""
    tokens = list(tokens)
    if eos_id in tokens:
        return tokens[: tokens.index(eos_id) + 1]
    return tokens


# --- masking-pattern combinatorics -------------------------------------------


def _check_scheme(L: int, k: int, scheme: str):
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if L < 1 or k < 1:
        raise ValueError("L and k must be positive")
    if scheme != "full-MDM" and L % k:
        raise ValueError(f"k={k} does not divide L={L}")


def count_masking_patterns(L: int, k: int, scheme: str) -> int:
    _check_scheme(L, k, scheme)
    if scheme == "full-MDM":
        return sum(math.comb(L, l) for l in range(1, L + 1))
    n = L // k
    if scheme == "block":
        return 2**k * n
    return floor_factorial_e(n) - 1


def floor_factorial_e(n: int) -> int:
    """floor(n! * e) in exact integer arithmetic.

    n! * e = sum_{j>=0} n!/j!; the j<=n terms are integers and the tail lies
    strictly in (0, 1) for n >= 1, so the floor is the integer part alone.
    """
    if n == 0:
        return 2
    return sum(math.factorial(n) // math.factorial(j) for j in range(n + 1))


def arrangement_sum(n: int) -> int:
    """sum_{i=1..n} C(n,i) * i!"""
    return sum(math.comb(n, i) * math.factorial(i) for i in range(1, n + 1))


def enumerate_patterns(L: int, k: int, scheme: str) -> int:
    """Brute-force count of distinct visible-context configurations.

    Each configuration is materialised as a tuple describing what the model
    sees and deduplicated through a set.
    """
    _check_scheme(L, k, scheme)
    if L > 14 or (scheme != "full-MDM" and L // k > 7):
        raise PatternSizeError("enumeration limited to L <= 14 and L/k <= 7")
    seen = set()
    if scheme == "full-MDM":
        # bidirectional: the state is which positions are masked
        for bits in itertools.product((0, 1), repeat=L):
            if any(bits):
                seen.add(bits)
    elif scheme == "block":
        # blocks left-to-right; earlier blocks clean, later ones not yet
        # present; inside the active block any subset may be masked
        n = L // k
        for b in range(n):
            for bits in itertools.product((0, 1), repeat=k):
                state = ("c",) * (b * k) + tuple("m" if x else "c" for x in bits)
                seen.add(state)
    else:
        # causal buffer: ordered sequence of clean slot ids, then masked ones
        # in positional order (implied by which ids are absent)
        n = L // k
        for r in range(1, n + 1):
            for clean in itertools.permutations(range(n), r):
                masked = tuple(i for i in range(n) if i not in clean)
                seen.add((clean, masked))
    return len(seen)
