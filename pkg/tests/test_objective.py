import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from slotdiff.objective import LossShapeError, arm_loss, batch_losses, collate, hybrid_loss, mdm_loss
from slotdiff.slotting import assemble, corrupt, partition

V = 24
MASK, PAD = 1, 0


def make(resp, k, clean_order, masked_idx, prompt=(3, 4)):
    part = partition(resp, k, PAD, len(prompt))
    return assemble(prompt, part, clean_order, masked_idx, 0.5, MASK, PAD)


def uniform_logits(inst):
    return torch.zeros(len(inst.buffer), V, dtype=torch.float64)


def test_empty_sides_are_zero():
    resp = list(range(5, 13))
    all_masked = make(resp, 4, [], [0, 1])
    all_clean = make(resp, 4, [1, 0], [])
    assert float(arm_loss(uniform_logits(all_masked), all_masked)) == 0.0
    assert float(mdm_loss(uniform_logits(all_clean), all_clean)) == 0.0


def test_uniform_logits_give_log_vocab():
    inst = make(list(range(5, 17)), 4, [2], [0, 1])
    lg = uniform_logits(inst)
    assert abs(float(arm_loss(lg, inst)) - math.log(V)) < 1e-6
    assert abs(float(mdm_loss(lg, inst)) - math.log(V)) < 1e-6


def test_term_counts():
    one_clean = make(list(range(5, 13)), 4, [1], [0])
    assert len(one_clean.arm_rows) == 3
    two_masked = make(list(range(5, 17)), 4, [1], [0, 2])
    assert len(two_masked.mdm_rows) == 8


def test_arm_targets_are_next_tokens_within_slot():
    inst = make(list(range(5, 17)), 4, [2, 0], [1])
    toks = inst.buffer.tokens.tolist()
    for r, tgt in zip(inst.arm_rows, inst.arm_targets):
        assert toks[r + 1] == tgt
        assert inst.buffer.position_ids[r + 1] == inst.buffer.position_ids[r] + 1


def test_mdm_targets_are_ground_truth_at_placeholder():
    resp = list(range(5, 17))
    inst = make(resp, 4, [2], [0, 1])
    pos = inst.buffer.position_ids.tolist()
    for r, tgt in zip(inst.mdm_rows, inst.mdm_targets):
        assert inst.buffer.tokens[r] == MASK
        assert resp[pos[r] - 2] == tgt


def test_pads_excluded():
    inst = make([5, 6, 7, 8, 9], 4, [1], [0])  # final slot holds 1 real token + 3 pads
    assert len(inst.arm_rows) == 0
    inst2 = make([5, 6, 7, 8, 9], 4, [0], [1])
    assert list(inst2.mdm_targets) == [9]


def test_hybrid_combination():
    inst = make(list(range(5, 17)), 4, [2], [0, 1])
    lg = torch.randn(len(inst.buffer), V, dtype=torch.float64)
    a, m = arm_loss(lg, inst), mdm_loss(lg, inst)
    assert float(hybrid_loss(lg, inst, 0.0)) == float(a)
    assert abs(float(hybrid_loss(lg, inst, 1.0)) - float(a + m)) < 1e-12
    with pytest.raises(ValueError):
        hybrid_loss(lg, inst, -1.0)


def test_hybrid_arithmetic():
    # lam=2, arm=0.5, mdm=0.25 -> 1.0
    assert 0.5 + 2 * 0.25 == 1.0


def test_shape_error():
    inst = make(list(range(5, 13)), 4, [1], [0])
    with pytest.raises(LossShapeError):
        arm_loss(torch.zeros(3, V), inst)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), lam1=st.floats(0, 5), lam2=st.floats(0, 5))
def test_nonnegative_and_monotone_in_lambda(seed, lam1, lam2):
    rng = np.random.default_rng(seed)
    resp = rng.integers(5, V, int(rng.integers(3, 20))).tolist()
    inst = corrupt([3], partition(resp, int(rng.integers(1, 6)), PAD, 1), float(rng.random()), rng, MASK, PAD)
    lg = torch.as_tensor(rng.normal(size=(len(inst.buffer), V)))
    a, m = float(arm_loss(lg, inst)), float(mdm_loss(lg, inst))
    assert a >= 0 and m >= 0
    lo, hi = sorted((lam1, lam2))
    assert float(hybrid_loss(lg, inst, lo)) <= float(hybrid_loss(lg, inst, hi)) + 1e-12


def test_batch_mean_of_samples():
    a = make(list(range(5, 13)), 4, [1], [0])
    b = make(list(range(5, 17)), 2, [0, 3, 5], [1, 2, 4])
    batch = collate([a, b], PAD)
    lg = torch.randn(2, batch.tokens.shape[1], V, dtype=torch.float64)
    _, _, total = batch_losses(lg, batch, 1.0)
    expect = 0.5 * (hybrid_loss(lg[0], a) + hybrid_loss(lg[1], b))
    assert abs(float(total) - float(expect)) < 1e-12
