"""Hybrid autoregressive + denoising loss over a corrupted slot layout.

Both terms come from one forward pass over the assembled buffer: causal
attention already restricts every prediction to its physical prefix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .slotting import TrainingInstance


class LossShapeError(ValueError):
    pass


class MissingTargetsError(ValueError):
    pass


def _check(logits: torch.Tensor, inst: TrainingInstance):
    if logits.dim() != 2 or logits.shape[0] < len(inst.buffer):
        raise LossShapeError(
            f"logits of shape {tuple(logits.shape)} do not cover a buffer of length {len(inst.buffer)}"
        )


def _mean_nll(logits: torch.Tensor, rows, targets) -> torch.Tensor:
    if len(rows) == 0:
        return logits.new_zeros(())
    rows = torch.as_tensor(rows, dtype=torch.long)
    targets = torch.as_tensor(targets, dtype=torch.long)
    return F.cross_entropy(logits[rows], targets, reduction="mean")


def arm_loss(logits: torch.Tensor, inst: TrainingInstance) -> torch.Tensor:
    """Next-token loss over clean slots, tokens 2..k of every slot.

    Averaged over the contributing terms, i.e. ``(k-1)*|clean|`` when the
    final slot carries no padding. Zero when there are no clean slots.
    """
    _check(logits, inst)
    return _mean_nll(logits, inst.arm_rows, inst.arm_targets)


def mdm_loss(logits: torch.Tensor, inst: TrainingInstance) -> torch.Tensor:
    """Each mask placeholder predicts its own ground-truth token."""
    _check(logits, inst)
    if inst.n_masked and len(inst.masked_truth) != inst.n_masked:
        raise MissingTargetsError("masked slots lack ground-truth targets")
    return _mean_nll(logits, inst.mdm_rows, inst.mdm_targets)


def hybrid_loss(logits: torch.Tensor, inst: TrainingInstance, lam: float = 1.0) -> torch.Tensor:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return arm_loss(logits, inst) + lam * mdm_loss(logits, inst)


@dataclass
class Batch:
    tokens: torch.Tensor
    positions: torch.Tensor
    instances: list[TrainingInstance]


def collate(instances: Sequence[TrainingInstance], pad_id: int) -> Batch:
    """Right-pad buffers to a common length.

    Pad slots get fresh position ids past the sequence, so they never collide
    with real tokens; they sit after everything else and are never attended to.
    """
    T = max(len(x.buffer) for x in instances)
    tokens = torch.full((len(instances), T), pad_id, dtype=torch.long)
    positions = torch.arange(T).repeat(len(instances), 1)
    for b, x in enumerate(instances):
        n = len(x.buffer)
        tokens[b, :n] = x.buffer.tokens
        positions[b, :n] = x.buffer.position_ids
    return Batch(tokens, positions, list(instances))


def batch_losses(logits: torch.Tensor, batch: Batch, lam: float = 1.0):
    """Mean over samples of (arm, mdm, total); total = arm + lam*mdm per sample."""
    arms, mdms = [], []
    for b, inst in enumerate(batch.instances):
        arms.append(arm_loss(logits[b], inst))
        mdms.append(mdm_loss(logits[b], inst))
    arm = torch.stack(arms).mean()
    mdm = torch.stack(mdms).mean()
    return arm, mdm, arm + lam * mdm
