import json
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from slotdiff.backbone import Transformer, build_model, count_forwards, forward, TokenBuffer
from slotdiff.decoder import (
    DecodeConfig,
    DecodePreconditionError,
    DecodeState,
    Runner,
    Slot,
    accepted_prefix,
    commit,
    complete_parallel,
    decode,
    decode_iteration,
    DecodeTrace,
    greedy_ar_decode,
    plan,
    prefill,
    select_slots,
    truncate_on_eos,
)

from conftest import small_config


def start_state(run, prompt, k, b, block=0):
    state = DecodeState(tuple(prompt), [], [], prefill(run, prompt), K=0)
    origins = [len(prompt) + block * b + i * k for i in range(b // k)]
    return replace(state, masked=origins, K=len(origins))


def prompts(rng, n, vocab, lo=3, hi=8):
    return [[3] + rng.integers(5, vocab, int(rng.integers(lo, hi))).tolist() for _ in range(n)]


# --- pure selection / verification rules --------------------------------------


def test_select_slots_threshold():
    assert select_slots([0.95, 0.40, 0.92], 0.9) == [0, 2]
    assert select_slots([0.5, 0.7, 0.6], 0.9) == [1]
    assert select_slots([0.1, 0.2, 0.3], 0.0) == [0, 1, 2]


def test_accepted_prefix_examples():
    probs = [0.9, 0.8, 0.7, 0.6, 0.5, 0.2, 0.9, 0.9]
    assert accepted_prefix(probs, 0.3) == 5
    assert accepted_prefix(probs, 0.3) // 4 == 1
    assert accepted_prefix([0.9] * 8, 0.3) // 4 == 2
    assert accepted_prefix([0.9, 0.8, 0.1, 0.9], 0.3) == 2


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_prefix_monotone_in_tau(probs):
    ls = [accepted_prefix(probs, t) for t in np.linspace(0.1, 0.9, 9)]
    assert all(a >= b for a, b in zip(ls, ls[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(k=4, b=6, max_len=12)
    with pytest.raises(ValueError):
        DecodeConfig(k=4, b=8, max_len=12)
    with pytest.raises(ValueError):
        DecodeConfig(tau_slot=1.5)
    with pytest.raises(ValueError):
        DecodeConfig(cache_mode="lazy")


# --- behaviour on real (untrained) models ---------------------------------------


def test_plan_requires_masked(model64):
    run = Runner(model64, DecodeConfig(k=2, b=4, max_len=4))
    state = replace(start_state(run, [3, 5], 2, 4), masked=[])
    with pytest.raises(DecodePreconditionError):
        plan(run, state)


def test_plan_single_forward_and_scores(model64):
    cfg = DecodeConfig(tau_slot=0.0, k=2, b=8, max_len=8)
    run = Runner(model64, cfg)
    state = start_state(run, [3, 5, 6], 2, 8)
    before = run.forwards
    p = plan(run, state)
    assert run.forwards == before + 1
    assert p.drafts.shape == (4, 2)
    assert p.selected == [0, 1, 2, 3]
    assert np.all((p.scores > 0) & (p.scores <= 1))
    np.testing.assert_allclose(p.first_probs, p.scores)  # greedy: drafted token is the top token


def test_completion_tau_one_takes_k_iterations(model64):
    k = 4
    cfg = DecodeConfig(tau_slot=0.0, tau_token=1.0, k=k, b=8, max_len=8)
    run = Runner(model64, cfg)
    state = start_state(run, [3, 5, 6], k, 8)
    p = plan(run, state)
    origins = [state.masked[i] for i in p.selected]
    c = complete_parallel(run, state, p.drafts[p.selected], p.first_probs[p.selected], origins)
    assert c.iterations == k
    for i, o in enumerate(origins):
        assert c.forced[i] == [o + j for j in range(k)]
        assert list(c.accept_step[i]) == [1, 2, 3, 4]


def test_completion_all_accepted_first_pass(model64):
    cfg = DecodeConfig(tau_slot=0.0, tau_token=0.0, k=4, b=8, max_len=8)
    run = Runner(model64, cfg)
    state = start_state(run, [3, 5, 6], 4, 8)
    p = plan(run, state)
    origins = [state.masked[i] for i in p.selected]
    before = run.forwards
    c = complete_parallel(run, state, p.drafts[p.selected], p.first_probs[p.selected], origins)
    assert c.iterations == 1 and run.forwards == before + 1
    np.testing.assert_array_equal(c.drafts, p.drafts[p.selected])


def test_single_slot_completion_is_greedy_ar(model64, rng):
    # one selected slot, greedy, forced token-by-token: each token is the
    # argmax given the clean context and the slot prefix
    k = 4
    cfg = DecodeConfig(tau_slot=1.0, tau_token=1.0, k=k, b=4, max_len=4)
    for prompt in prompts(rng, 5, model64.cfg.vocab_size):
        run = Runner(model64, cfg)
        state = start_state(run, prompt, k, 4)
        p = plan(run, state)
        c = complete_parallel(run, state, p.drafts[p.selected], p.first_probs[p.selected], [state.masked[0]])
        ref = []
        for _ in range(k):
            seq = prompt + ref + [model64.cfg.mask_id]
            with torch.no_grad():
                lg, _ = model64(torch.as_tensor(seq)[None], torch.arange(len(seq))[None])
            ref.append(int(lg[0, -1].argmax()))
        assert c.drafts[0].tolist() == ref


@pytest.mark.parametrize(
    "dcfg",
    [
        DecodeConfig(tau_slot=0.0, tau_token=0.0, k=1, b=1, max_len=12),
        DecodeConfig(tau_slot=0.9, tau_token=1.0, k=4, b=4, max_len=12),
    ],
    ids=["k1", "k4-forced"],
)
def test_arm_reduction(model64, rng, dcfg):
    for prompt in prompts(rng, 10, model64.cfg.vocab_size):
        out = decode(model64, prompt, dcfg).response
        ref = greedy_ar_decode(model64, prompt, dcfg.max_len)
        assert out == ref


class AlwaysEos(Transformer):
    def forward(self, tokens, positions, cache=None):
        logits, kv = super().forward(tokens, positions, cache)
        logits = logits.clone()
        logits[..., self.cfg.eos_id] += 50.0
        return logits, kv


def test_immediate_eos():
    cfg = small_config()
    torch.manual_seed(0)
    model = AlwaysEos(cfg).double()
    res = decode(model, [3, 5, 6], DecodeConfig(tau_slot=0.5, tau_token=0.3, k=4, b=8, max_len=16))
    assert res.response == [cfg.eos_id]
    assert res.trace.forwards >= 1
    assert not res.truncated


def test_truncation_flag(model64):
    res = decode(model64, [3, 5, 6], DecodeConfig(tau_slot=0.5, tau_token=0.3, k=2, b=4, max_len=8))
    if model64.cfg.eos_id not in res.response:
        assert res.truncated and len(res.response) == 8


def test_truncate_on_eos_drops_later_slots(cfg):
    k = 4
    masked = [o for o in range(0, 128, k) if o != 36]
    state = DecodeState((3,), [Slot((9, 2, 9, 9), 36)], masked, cache=None, K=32)
    out = truncate_on_eos(state, cfg.eos_id)
    assert out.eos_pos == 37
    assert max(out.masked) == 32 and 40 not in out.masked
    unchanged = DecodeState((3,), [Slot((9, 9, 9, 9), 36)], masked, cache=None, K=32)
    assert truncate_on_eos(unchanged, cfg.eos_id).masked == masked
    last = DecodeState((3,), [Slot((9, 9, 9, 2), 124)], masked[:-1], cache=None, K=32)
    assert truncate_on_eos(last, cfg.eos_id).masked == masked[:-1]


def test_commit_single_slot_modes_agree(model64):
    k = 4
    caches = {}
    for mode in ("concat", "recompute"):
        cfg = DecodeConfig(tau_slot=1.0, tau_token=0.5, k=k, b=8, max_len=8, cache_mode=mode)
        run = Runner(model64, cfg)
        state = start_state(run, [3, 5, 6, 7], k, 8)
        p = plan(run, state)
        origins = [state.masked[p.selected[0]]]
        c = complete_parallel(run, state, p.drafts[p.selected[:1]], p.first_probs[p.selected[:1]], origins)
        new = commit(run, state, [Slot(tuple(c.drafts[0].tolist()), origins[0])], c.caches)
        caches[mode] = new.cache
        assert new.t == 0.5
    a, b = caches["concat"], caches["recompute"]
    assert torch.equal(a.position_ids, b.position_ids)
    for x, y in zip(a.keys + a.values, b.keys + b.values):
        assert (x - y).abs().max() < 1e-5


def test_commit_final_slot_sets_t_zero(model64):
    cfg = DecodeConfig(tau_slot=0.0, tau_token=0.0, k=2, b=2, max_len=2)
    run = Runner(model64, cfg)
    state = start_state(run, [3, 5], 2, 2)
    state = decode_iteration(run, state, DecodeTrace())
    assert state.t == 0 and state.masked == []


def test_recompute_cache_is_fresh_context(model64):
    cfg = DecodeConfig(tau_slot=0.2, tau_token=0.05, k=2, b=8, max_len=8, cache_mode="recompute")
    run = Runner(model64, cfg)
    prompt = [3, 5, 6, 7]
    state = start_state(run, prompt, 2, 8)
    trace = DecodeTrace()
    while state.masked:
        state = decode_iteration(run, state, trace)
    toks = list(prompt) + [t for s in state.clean for t in s.tokens]
    pos = list(range(len(prompt))) + [s.origin + j for s in state.clean for j in range(len(s.tokens))]
    _, fresh = forward(model64, TokenBuffer(toks, pos))
    assert torch.equal(fresh.position_ids, state.cache.position_ids)
    for x, y in zip(fresh.keys + fresh.values, state.cache.keys + state.cache.values):
        assert (x - y).abs().max() < 1e-5


def test_trace_invariants_and_forward_accounting(rng):
    model = build_model(small_config(), seed=5, dtype=torch.float64).eval()
    counter = count_forwards(model)
    cfg = DecodeConfig(tau_slot=0.1, tau_token=0.05, k=2, b=8, max_len=16)
    for prompt in prompts(rng, 6, model.cfg.vocab_size):
        before = counter()
        res = decode(model, prompt, cfg)
        tr = res.trace
        assert tr.forwards == counter() - before
        positions = [t["pos"] for t in tr.tokens]
        assert len(positions) == len(set(positions))
        assert tr.tokens_total == len(positions)
        assert tr.tpf == pytest.approx(tr.tokens_total / tr.forwards)
        # committed slots tile a contiguous range with no gaps
        assert sorted(positions) == list(range(len(prompt), len(prompt) + len(positions)))
        for s in tr.slots:
            assert set(s["forced"]) <= set(range(s["origin"], s["origin"] + cfg.k))
        d = json.loads(tr.to_json())
        assert set(d) == {"slots", "tokens", "forwards", "tokens_total", "tpf"}
        assert all(set(s) == {"origin", "iteration", "path", "forced"} for s in d["slots"])


def test_greedy_determinism(model64):
    cfg = DecodeConfig(tau_slot=0.1, tau_token=0.05, k=2, b=8, max_len=16)
    a, b = decode(model64, [3, 5, 6], cfg), decode(model64, [3, 5, 6], cfg)
    assert a.response == b.response
    assert a.trace.to_dict() == b.trace.to_dict()


def test_sampled_mode_seeded(model64):
    cfg = DecodeConfig(tau_slot=0.1, tau_token=0.05, k=2, b=8, max_len=16, draft_mode="sampled", seed=11)
    a, b = decode(model64, [3, 5, 6], cfg), decode(model64, [3, 5, 6], cfg)
    assert a.response == b.response
    c = decode(model64, [3, 5, 6], replace(cfg, seed=12))
    assert len(c.response) >= 1


def test_prompt_checks(model64):
    with pytest.raises(DecodePreconditionError):
        decode(model64, [], DecodeConfig(k=2, b=4, max_len=8))
    with pytest.raises(DecodePreconditionError):
        decode(model64, [3] * 10, DecodeConfig(k=2, b=128, max_len=128))
