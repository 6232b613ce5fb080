import json

import pytest
import torch

from slotdiff.backbone import TokenBuffer, build_model, forward, make_optimizer, train_step
from slotdiff.checkpoint import (
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigMismatchError,
    load_checkpoint,
    load_optimizer_tensors,
    save_checkpoint,
)

from conftest import small_config


@pytest.fixture
def trained(rng):
    model = build_model(small_config(), seed=0)
    opt, sched = make_optimizer(model, lr=1e-3, warmup=1)
    toks = torch.as_tensor(rng.integers(5, 24, (2, 6)))
    pos = torch.arange(6).expand(2, 6)
    for i in range(3):
        train_step(model, opt, toks, pos, lambda lg: lg.logsumexp(-1).mean(), sched, step=i)
    return model, opt


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_bitwise_round_trip(tmp_path, trained, dtype):
    model, opt = trained
    model = model.to(dtype)
    save_checkpoint(tmp_path / "ck", model, opt, step=3, meta={"task": "copy"})
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.step == 3 and ck.meta == {"task": "copy"} and ck.config == model.cfg
    for name, t in model.state_dict().items():
        assert ck.params[name].dtype == t.dtype
        assert torch.equal(ck.params[name], t)
    assert any(k.endswith("exp_avg_sq") for k in ck.opt_state)
    again = ck.build_model().eval()
    buf = TokenBuffer([3, 7, 8, 1], [0, 1, 2, 3])
    a, _ = forward(model.eval(), buf)
    b, _ = forward(again, buf)
    assert torch.equal(a, b)


def test_optimizer_state_restores(tmp_path, trained):
    model, opt = trained
    save_checkpoint(tmp_path / "ck", model, opt, step=3)
    ck = load_checkpoint(tmp_path / "ck")
    fresh = ck.build_model()
    opt2, _ = make_optimizer(fresh)
    load_optimizer_tensors(fresh, opt2, ck.opt_state, ck.step)
    p_old = dict(model.named_parameters())
    for name, p in fresh.named_parameters():
        assert torch.equal(opt2.state[p]["exp_avg"], opt.state[p_old[name]]["exp_avg"])


def test_config_mismatch(tmp_path, trained):
    save_checkpoint(tmp_path / "ck", trained[0])
    with pytest.raises(ConfigMismatchError, match="vocab_size"):
        load_checkpoint(tmp_path / "ck", small_config(vocab_size=30))


def test_version_and_truncation(tmp_path, trained):
    path = save_checkpoint(tmp_path / "ck", trained[0])
    manifest = json.loads((path / "manifest.json").read_text())
    blob = (path / "tensors.bin").read_bytes()
    (path / "tensors.bin").write_bytes(blob[:-10])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)
    (path / "tensors.bin").write_bytes(blob)
    manifest["version"] = 99
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


def test_overwrite_leaves_no_temp_dirs(tmp_path, trained):
    save_checkpoint(tmp_path / "ck", trained[0], step=1)
    save_checkpoint(tmp_path / "ck", trained[0], step=2)
    assert load_checkpoint(tmp_path / "ck").step == 2
    assert [p.name for p in tmp_path.iterdir()] == ["ck"]
