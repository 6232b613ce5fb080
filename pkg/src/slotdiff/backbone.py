"""Small causal transformer with explicit position IDs and an exact KV cache.

Tokens are attended causally in *physical* buffer order while rotary
embeddings are driven only by the per-token position IDs, so a buffer can be
laid out in any order without the model losing track of where each token
sits in the sequence.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class EmptyInputError(ValueError):
    pass


class PositionRangeError(ValueError):
    pass


class CacheCollisionError(ValueError):
    pass


class DivergedTrainingError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_position: int = 512
    rope_base: float = 10000.0
    pad_id: int = 0
    mask_id: int = 1
    eos_id: int = 2
    bos_id: int = 3

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head_dim must be even for rotary embeddings")
        specials = (self.mask_id, self.pad_id, self.eos_id)
        if len(set(specials)) != 3:
            raise ValueError("mask_id, pad_id and eos_id must be pairwise distinct")
        if any(s < 0 or s >= self.vocab_size for s in (*specials, self.bos_id)):
            raise ValueError("special token ids must lie in [0, vocab_size)")
        if self.rope_base <= 0:
            raise ValueError("rope_base must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TokenBuffer:
    """Token IDs paired one-to-one with explicit position IDs."""

    tokens: torch.Tensor
    position_ids: torch.Tensor

    def __post_init__(self):
        self.tokens = torch.as_tensor(self.tokens, dtype=torch.long).reshape(-1)
        self.position_ids = torch.as_tensor(self.position_ids, dtype=torch.long).reshape(-1)
        if self.tokens.shape != self.position_ids.shape:
            raise ValueError("tokens and position_ids must have equal length")

    def __len__(self) -> int:
        return int(self.tokens.numel())

    @classmethod
    def contiguous(cls, tokens: Sequence[int], start: int = 0) -> "TokenBuffer":
        return cls(torch.as_tensor(list(tokens)), torch.arange(start, start + len(tokens)))

    def concat(self, other: "TokenBuffer") -> "TokenBuffer":
        return TokenBuffer(
            torch.cat([self.tokens, other.tokens]),
            torch.cat([self.position_ids, other.position_ids]),
        )


@dataclass
class KVCache:
    """Per-layer keys/values of shape [cached_len, n_heads, head_dim].

    Keys are stored already rotated, so entries are self-contained and can be
    concatenated in any physical order.
    """

    keys: list[torch.Tensor]
    values: list[torch.Tensor]
    position_ids: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.long))

    def __len__(self) -> int:
        return int(self.position_ids.numel())

    @classmethod
    def empty(cls, cfg: ModelConfig, dtype=torch.float32) -> "KVCache":
        z = torch.zeros(0, cfg.n_heads, cfg.head_dim, dtype=dtype)
        return cls([z] * cfg.n_layers, [z] * cfg.n_layers)

    def extend(self, other: "KVCache") -> "KVCache":
        """Return self ++ other. Existing entries are reused untouched."""
        clash = set(self.position_ids.tolist()) & set(other.position_ids.tolist())
        if clash:
            raise CacheCollisionError(f"position ids already cached: {sorted(clash)[:8]}")
        return KVCache(
            [torch.cat([a, b]) for a, b in zip(self.keys, other.keys)],
            [torch.cat([a, b]) for a, b in zip(self.values, other.values)],
            torch.cat([self.position_ids, other.position_ids]),
        )

    def select(self, index) -> "KVCache":
        """Entries at the given physical indices (slice, list or tensor)."""
        if not isinstance(index, slice):
            index = torch.as_tensor(index, dtype=torch.long)
        return KVCache(
            [k[index] for k in self.keys],
            [v[index] for v in self.values],
            self.position_ids[index],
        )


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rope_angles(position_ids: torch.Tensor, head_dim: int, base: float) -> torch.Tensor:
    # computed in float64: positions up to max_position would otherwise lose
    # ~1e-5 rad of angle precision, breaking exact translation invariance
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    return position_ids.to(torch.float64)[..., None] * inv_freq


def apply_rope(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """Rotate pairs (x[2i], x[2i+1]) of x[..., T, H, D] by angles[..., T, D/2]."""
    cos = torch.cos(angles).to(x.dtype)[..., None, :]
    sin = torch.sin(angles).to(x.dtype)[..., None, :]
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, bias=False)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model, bias=False)

    def forward(self, x, angles, past_k=None, past_v=None):
        B, T, _ = x.shape
        H, D = self.cfg.n_heads, self.cfg.head_dim
        q, k, v = self.qkv(x).view(B, T, 3, H, D).unbind(2)
        q = apply_rope(q, angles)
        k = apply_rope(k, angles)

        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        if past_k is not None and past_k.shape[0] > 0:
            C = past_k.shape[0]
            keys = torch.cat([past_k.unsqueeze(0).expand(B, -1, -1, -1), k], dim=1)
            vals = torch.cat([past_v.unsqueeze(0).expand(B, -1, -1, -1), v], dim=1)
            visible = torch.cat([torch.ones(T, C, dtype=torch.bool, device=x.device), causal], dim=1)
        else:
            keys, vals, visible = k, v, causal

        scores = torch.einsum("bthd,bshd->bhts", q, keys) / math.sqrt(D)
        scores = scores.masked_fill(~visible, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        y = torch.einsum("bhts,bshd->bthd", att, vals).reshape(B, T, H * D)
        return self.proj(y), k, v


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = RMSNorm(cfg.d_model)
        self.attn = Attention(cfg)
        self.norm2 = RMSNorm(cfg.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff, bias=False),
            nn.GELU(),
            nn.Linear(cfg.d_ff, cfg.d_model, bias=False),
        )

    def forward(self, x, angles, past_k=None, past_v=None):
        a, k, v = self.attn(self.norm1(x), angles, past_k, past_v)
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, k, v


class Transformer(nn.Module):
    """Decoder-only transformer.

    ``forward(tokens[B,T], positions[B,T], cache)`` attends each row to the
    shared cache plus its own causal prefix. Returns logits ``[B,T,V]`` and the
    rotated keys/values of the new tokens, one ``(k, v)`` pair per layer with
    shape ``[B,T,H,D]``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm = RMSNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.02)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=0.02)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def forward(self, tokens, positions, cache: KVCache | None = None):
        if tokens.numel() == 0:
            raise EmptyInputError("cannot run the model on an empty buffer")
        if int(positions.max()) >= self.cfg.max_position or int(positions.min()) < 0:
            raise PositionRangeError(
                f"position ids must lie in [0, {self.cfg.max_position}), "
                f"got [{int(positions.min())}, {int(positions.max())}]"
            )
        angles = rope_angles(positions, self.cfg.head_dim, self.cfg.rope_base)
        x = self.tok_emb(tokens)
        new_kv = []
        for i, block in enumerate(self.blocks):
            pk = cache.keys[i] if cache is not None else None
            pv = cache.values[i] if cache is not None else None
            x, k, v = block(x, angles, pk, pv)
            new_kv.append((k, v))
        return self.head(self.norm(x)), new_kv


def row_caches(new_kv, positions: torch.Tensor) -> list[KVCache]:
    """Split the batched KV output of ``Transformer.forward`` into per-row caches."""
    out = []
    for b in range(positions.shape[0]):
        out.append(
            KVCache(
                [k[b].detach() for k, _ in new_kv],
                [v[b].detach() for _, v in new_kv],
                positions[b].clone(),
            )
        )
    return out


def forward(model: Transformer, buffer: TokenBuffer, cache: KVCache | None = None, want_grads: bool = False):
    """Run one buffer through the model.

    Returns ``(logits[len, vocab], new_cache)`` where ``new_cache`` is the
    given cache (or an empty one) followed by this buffer's key/value states.
    """
    if len(buffer) == 0:
        raise EmptyInputError("cannot run the model on an empty buffer")
    if cache is not None and len(cache):
        clash = set(cache.position_ids.tolist()) & set(buffer.position_ids.tolist())
        if clash:
            raise CacheCollisionError(f"buffer reuses cached position ids {sorted(clash)[:8]}")
    with torch.set_grad_enabled(want_grads):
        logits, new_kv = model(buffer.tokens[None], buffer.position_ids[None], cache)
    base = cache if cache is not None else KVCache.empty(model.cfg, model.dtype)
    return logits[0], base.extend(row_caches(new_kv, buffer.position_ids[None])[0])


# --- training -----------------------------------------------------------------


def make_optimizer(model: Transformer, lr: float = 1e-3, warmup: int = 100, weight_decay: float = 0.01):
    """AdamW with fixed learning rate after a linear warmup."""
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.98), weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / max(1, warmup)))
    return opt, sched


def train_step(
    model: Transformer,
    optimizer: torch.optim.Optimizer,
    tokens: torch.Tensor,
    positions: torch.Tensor,
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    scheduler=None,
    step: int = 0,
    clip: float | None = 1.0,
) -> float:
    """One optimizer step on a padded batch.

    ``loss_fn`` maps logits ``[B,T,V]`` to a scalar; excluding pad rows from
    the loss is its responsibility (the objective module does this).
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    logits, _ = model(tokens, positions)
    loss = loss_fn(logits)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise DivergedTrainingError(step, value)
    loss.backward()
    if clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return value


def named_tensors(model: Transformer) -> dict[str, torch.Tensor]:
    return {name: p.detach() for name, p in model.named_parameters()}


def parameter_count(model: Transformer) -> int:
    return sum(p.numel() for p in model.parameters())


def count_forwards(model: Transformer) -> Callable[[], int]:
    """Attach a forward hook; the returned callable reports invocations so far."""
    calls = [0]

    def hook(*_):
        calls[0] += 1

    model.register_forward_hook(hook)
    return lambda: calls[0]


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> Transformer:
    torch.manual_seed(seed)
    return Transformer(cfg).to(dtype)

