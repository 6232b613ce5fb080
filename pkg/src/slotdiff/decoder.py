"""Slot-level plan-and-infill decoding.

Each iteration drafts every masked slot of the current block in one pass,
picks the confident ones, and then either accepts a verified run of whole
slots or falls back to per-slot verify/re-mask completion. Committed slots
move in front of the masked ones so their KV states are reused verbatim.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .backbone import KVCache, Transformer, row_caches
from .slotting import restore_order, truncate_at_eos


class DecodePreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    tau_slot: float = 0.9
    tau_token: float = 0.3
    k: int = 32
    b: int = 128
    max_len: int = 512
    cache_mode: str = "concat"
    draft_mode: str = "greedy"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.tau_slot <= 1.0 and 0.0 <= self.tau_token <= 1.0):
            raise ValueError("thresholds must lie in [0, 1]")
        if self.k < 1 or self.b < self.k or self.b % self.k:
            raise ValueError(f"need b >= k and k | b, got k={self.k}, b={self.b}")
        if self.max_len < self.b or self.max_len % self.b:
            raise ValueError(f"max_len={self.max_len} must be a positive multiple of b={self.b}")
        if self.cache_mode not in ("concat", "recompute"):
            raise ValueError(f"unknown cache_mode {self.cache_mode!r}")
        if self.draft_mode not in ("greedy", "sampled"):
            raise ValueError(f"unknown draft_mode {self.draft_mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


PRESETS = {
    # long-form generation: 32-token slots, 512-token budget
    "large": DecodeConfig(tau_slot=0.9, tau_token=0.3, k=32, b=128, max_len=512),
    # small slots and blocks for the toy tasks
    "toy": DecodeConfig(tau_slot=0.6, tau_token=0.3, k=4, b=16, max_len=32),
    # one single-token slot per block: plain greedy left-to-right decoding
    "ar": DecodeConfig(tau_slot=0.0, tau_token=0.0, k=1, b=1, max_len=32),
}


@dataclass
class Slot:
    tokens: tuple[int, ...]
    origin: int


@dataclass
class DecodeState:
    prompt: tuple[int, ...]
    clean: list[Slot]
    masked: list[int]
    cache: KVCache
    K: int
    eos_pos: int | None = None

    @property
    def t(self) -> float:
        return len(self.masked) / self.K if self.K else 0.0


@dataclass
class DecodeTrace:
    slots: list[dict] = field(default_factory=list)
    tokens: list[dict] = field(default_factory=list)
    forwards: int = 0
    iterations: int = 0
    steps: int = 0
    truncated: bool = False

    @property
    def tokens_total(self) -> int:
        return len(self.tokens)

    @property
    def tpf(self) -> float:
        return self.tokens_total / self.forwards if self.forwards else 0.0

    def to_dict(self) -> dict:
        return {
            "slots": self.slots,
            "tokens": self.tokens,
            "forwards": self.forwards,
            "tokens_total": self.tokens_total,
            "tpf": self.tpf,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def max_slots_per_iteration(self) -> int:
        per = {}
        for s in self.slots:
            per[s["iteration"]] = per.get(s["iteration"], 0) + 1
        return max(per.values(), default=0)


@dataclass
class Plan:
    drafts: np.ndarray  # [n_masked, k]
    first_probs: np.ndarray  # probability of each drafted first token
    scores: np.ndarray  # top-token probability at each slot's first position
    selected: list[int]  # indices into state.masked, ascending


class Runner:
    """Counts model invocations and owns the drafting RNG."""

    def __init__(self, model: Transformer, cfg: DecodeConfig):
        self.model = model
        self.cfg = cfg
        self.forwards = 0
        self.gen = torch.Generator().manual_seed(cfg.seed)

    @torch.no_grad()
    def __call__(self, tokens, positions, cache):
        self.forwards += 1
        return self.model(tokens, positions, cache)

    def draw(self, logits: torch.Tensor) -> torch.Tensor:
        if self.cfg.draft_mode == "greedy":
            return logits.argmax(-1)
        p = torch.softmax(logits.double() / self.cfg.temperature, -1)
        flat = p.reshape(-1, p.shape[-1])
        return torch.multinomial(flat, 1, generator=self.gen).reshape(p.shape[:-1])


def slot_positions(origins: Sequence[int], k: int) -> torch.Tensor:
    return torch.as_tensor([[o + j for j in range(k)] for o in origins], dtype=torch.long)


def select_slots(scores: Sequence[float], tau_slot: float) -> list[int]:
    """Slots scoring above the threshold; the single best one if none does."""
    scores = np.asarray(scores, dtype=float)
    chosen = [i for i, s in enumerate(scores) if s > tau_slot]
    return chosen or [int(np.argmax(scores))]


def accepted_prefix(probs: Sequence[float], tau: float) -> int:
    """Length of the longest prefix whose probabilities all exceed tau."""
    n = 0
    for p in probs:
        if not p > tau:
            break
        n += 1
    return n


def plan(run: Runner, state: DecodeState) -> Plan:
    """Draft all masked slots of the block in one pass and select a batch."""
    if not state.masked:
        raise DecodePreconditionError("planning requires at least one masked slot")
    k = run.cfg.k
    pos = slot_positions(state.masked, k).reshape(1, -1)
    tokens = torch.full_like(pos, run.model.cfg.mask_id)
    logits, _ = run(tokens, pos, state.cache)
    logits = logits[0].reshape(len(state.masked), k, -1)
    probs = torch.softmax(logits.double(), -1)
    drafts = run.draw(logits)
    first = probs[:, 0, :]
    scores = first.max(-1).values.numpy()
    first_probs = first.gather(-1, drafts[:, :1]).squeeze(-1).numpy()
    return Plan(drafts.numpy().copy(), first_probs, scores, select_slots(scores, run.cfg.tau_slot))


def _token_probs(logits: torch.Tensor, tokens: torch.Tensor) -> np.ndarray:
    """P(tokens[j] | row prefix) for j >= 1; column 0 is left as NaN."""
    probs = torch.softmax(logits.double(), -1)
    out = torch.full(tokens.shape, float("nan"), dtype=torch.float64)
    out[:, 1:] = probs[:, :-1].gather(-1, tokens[:, 1:, None]).squeeze(-1)
    return out.numpy()


def verify_probs(run: Runner, state: DecodeState, drafts: np.ndarray, first_probs: Sequence[float], origins):
    """Probabilities of the concatenated drafts (positional order) in one pass.

    Each slot's first token keeps its planning probability; every later token
    is scored given prompt, clean slots and all preceding draft tokens.
    """
    k = run.cfg.k
    pos = slot_positions(origins, k).reshape(1, -1)
    toks = torch.as_tensor(drafts, dtype=torch.long).reshape(1, -1)
    logits, kv = run(toks, pos, state.cache)
    probs = _token_probs(logits[0][None], toks)[0].reshape(len(origins), k)
    probs[:, 0] = first_probs
    return probs.reshape(-1), row_caches(kv, pos)[0]


def global_verify(run: Runner, state: DecodeState, p: Plan):
    """Returns ``(n_accepted_slots, probs, kv)``; zero slots means fall back."""
    k = run.cfg.k
    origins = [state.masked[i] for i in p.selected]
    probs, kv = verify_probs(run, state, p.drafts[p.selected], p.first_probs[p.selected], origins)
    l = accepted_prefix(probs, run.cfg.tau_token)
    return l // k, probs, kv


@dataclass
class Completion:
    drafts: np.ndarray
    caches: list[KVCache]
    accept_step: np.ndarray  # per token: completion iteration that locked it
    forced: list[list[int]]
    iterations: int


def complete_parallel(run: Runner, state: DecodeState, drafts, first_probs, origins, seed_verify=None) -> Completion:
    """Independent verify/re-mask loop for each selected slot.

    Rows never attend to each other. A row whose verified prefix fails to
    grow has its next token force-accepted, so every row finishes within k
    iterations. ``seed_verify=(probs, kv)`` reuses an identical verification
    pass for a single row instead of repeating it.
    """
    cfg, mask_id = run.cfg, run.model.cfg.mask_id
    k, n = cfg.k, len(origins)
    drafts = np.array(drafts, dtype=np.int64).reshape(n, k)
    first_probs = np.asarray(first_probs, dtype=float)
    pos = slot_positions(origins, k)
    locked = np.zeros(n, dtype=int)
    accept_step = np.zeros((n, k), dtype=int)
    forced = [[] for _ in range(n)]
    caches: list[KVCache | None] = [None] * n
    m = 0
    while True:
        m += 1
        todo = [i for i in range(n) if locked[i] < k]
        if m == 1 and seed_verify is not None and n == 1:
            probs, kv = seed_verify
            probs = np.asarray(probs, dtype=float).reshape(1, k)
            rows = [kv]
        else:
            toks = torch.as_tensor(drafts[todo])
            logits, kv = run(toks, pos[todo], state.cache)
            probs = _token_probs(logits, toks)
            rows = row_caches(kv, pos[todo])
        for r, i in enumerate(todo):
            pr = probs[r].copy()
            pr[0] = first_probs[i]
            l = int(locked[i])
            while l < k and pr[l] > cfg.tau_token:
                l += 1
            if l == locked[i]:
                forced[i].append(origins[i] + l)
                l += 1
            accept_step[i, locked[i] : l] = m
            locked[i] = l
            if l == k:
                caches[i] = rows[r]
        todo = [i for i in range(n) if locked[i] < k]
        if not todo:
            return Completion(drafts, caches, accept_step, forced, m)
        buf = drafts[todo].copy()
        for r, i in enumerate(todo):
            buf[r, locked[i] :] = mask_id
        toks = torch.as_tensor(buf)
        logits, _ = run(toks, pos[todo], state.cache)
        new = run.draw(logits).numpy()
        for r, i in enumerate(todo):
            drafts[i, locked[i] :] = new[r, locked[i] :]


def commit(run: Runner, state: DecodeState, slots: list[Slot], caches: list[KVCache]) -> DecodeState:
    """Move completed slots from masked to clean (ascending origin) and extend the cache."""
    order = sorted(range(len(slots)), key=lambda i: slots[i].origin)
    slots = [slots[i] for i in order]
    caches = [caches[i] for i in order]
    if run.cfg.cache_mode == "concat":
        cache = state.cache
        for c in caches:
            cache = cache.extend(c)
    else:
        cache = recompute_cache(run, state.cache, slots)
    done = {s.origin for s in slots}
    return replace(
        state,
        clean=state.clean + slots,
        masked=[o for o in state.masked if o not in done],
        cache=cache,
    )


def recompute_cache(run: Runner, cache: KVCache, slots: list[Slot]) -> KVCache:
    toks = torch.as_tensor([t for s in slots for t in s.tokens])[None]
    pos = torch.as_tensor([s.origin + j for s in slots for j in range(len(s.tokens))])[None]
    _, kv = run(toks, pos, cache)
    return cache.extend(row_caches(kv, pos)[0])


def truncate_on_eos(state: DecodeState, eos_id: int) -> DecodeState:
    """Drop masked slots lying wholly after the earliest committed EOS."""
    eos = [s.origin + j for s in state.clean for j, t in enumerate(s.tokens) if t == eos_id]
    if not eos:
        return state
    e = min(eos)
    return replace(state, eos_pos=e, masked=[o for o in state.masked if o <= e])


def prefill(run: Runner, prompt: Sequence[int]) -> KVCache:
    toks = torch.as_tensor(list(prompt))[None]
    pos = torch.arange(len(prompt))[None]
    _, kv = run(toks, pos, None)
    return row_caches(kv, pos)[0]


def decode_iteration(run: Runner, state: DecodeState, trace: DecodeTrace) -> DecodeState:
    """One plan-and-infill cycle; records committed slots and tokens in ``trace``.

    Token ``iter`` values count verification passes over the whole decode, so
    they order tokens in time even inside a slot.
    """
    k = run.cfg.k
    trace.iterations += 1
    it = trace.iterations
    p = plan(run, state)
    origins = [state.masked[i] for i in p.selected]
    n_acc, probs, kv = global_verify(run, state, p)
    trace.steps += 1
    if n_acc:
        slots = [Slot(tuple(int(x) for x in p.drafts[p.selected[i]]), origins[i]) for i in range(n_acc)]
        caches = [kv.select(slice(i * k, (i + 1) * k)) for i in range(n_acc)]
        for s in slots:
            trace.slots.append({"origin": s.origin, "iteration": it, "path": "global", "forced": []})
            trace.tokens.extend({"pos": s.origin + j, "iter": trace.steps} for j in range(k))
    else:
        seed = (probs[:k], kv) if len(origins) == 1 else None
        c = complete_parallel(run, state, p.drafts[p.selected], p.first_probs[p.selected], origins, seed)
        slots = [Slot(tuple(int(x) for x in c.drafts[i]), origins[i]) for i in range(len(origins))]
        caches = c.caches
        for i, s in enumerate(slots):
            trace.slots.append({"origin": s.origin, "iteration": it, "path": "iterative", "forced": c.forced[i]})
            trace.tokens.extend(
                {"pos": s.origin + j, "iter": trace.steps + int(c.accept_step[i, j])} for j in range(k)
            )
        trace.steps += c.iterations
    state = commit(run, state, slots, caches)
    return truncate_on_eos(state, run.model.cfg.eos_id)


@dataclass
class DecodeResult:
    response: list[int]
    trace: DecodeTrace

    @property
    def truncated(self) -> bool:
        return self.trace.truncated


def decode(model: Transformer, prompt: Sequence[int], cfg: DecodeConfig) -> DecodeResult:
    """Generate a response for ``prompt``; blocks of ``cfg.b`` tokens left to right."""
    if len(prompt) == 0:
        raise DecodePreconditionError("prompt must be non-empty")
    if len(prompt) + cfg.max_len > model.cfg.max_position:
        raise DecodePreconditionError(
            f"prompt ({len(prompt)}) + max_len ({cfg.max_len}) exceeds max_position ({model.cfg.max_position})"
        )
    model.eval()
    run = Runner(model, cfg)
    trace = DecodeTrace()
    start = len(prompt)
    state = DecodeState(tuple(prompt), [], [], prefill(run, prompt), K=0)
    n_blocks = cfg.max_len // cfg.b
    for blk in range(n_blocks):
        base = start + blk * cfg.b
        origins = [base + i * cfg.k for i in range(cfg.b // cfg.k)]
        state = replace(state, masked=origins, K=len(origins))
        while state.masked:
            state = decode_iteration(run, state, trace)
        if state.eos_pos is not None:
            break
    trace.forwards = run.forwards
    eos = model.cfg.eos_id
    response = truncate_at_eos(restore_order([(s.tokens, s.origin) for s in state.clean]), eos)
    trace.truncated = eos not in response
    return DecodeResult(response, trace)


@torch.no_grad()
def greedy_ar_decode(model: Transformer, prompt: Sequence[int], max_len: int) -> list[int]:
    """Reference left-to-right greedy decoder with no cache and no slots.

    Every step reruns the whole sequence with one mask placeholder appended at
    the next position and takes the argmax there.
    """
    model.eval()
    out: list[int] = []
    cfg = model.cfg
    for _ in range(max_len):
        seq = list(prompt) + out + [cfg.mask_id]
        logits, _ = model(torch.as_tensor(seq)[None], torch.arange(len(seq))[None])
        tok = int(logits[0, -1].argmax())
        out.append(tok)
        if tok == cfg.eos_id:
            break
    return out
