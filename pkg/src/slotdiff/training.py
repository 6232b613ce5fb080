"""Run configuration and the corrupt -> forward -> hybrid loss -> step loop."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import ModelConfig, Transformer, build_model, make_optimizer, train_step
from .checkpoint import save_checkpoint
from .corpus import atomic_write_text, gen_corpus, write_jsonl
from .decoder import PRESETS, DecodeConfig
from .objective import batch_losses, collate
from .slotting import sample_instance

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class RunConfig:
    task: str = "copy"
    n_train: int = 4000
    n_eval: int = 200
    len_min: int = 4
    len_max: int = 12
    base: int = 7
    model: dict = field(default_factory=dict)
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 100
    lam: float = 1.0
    slot_sizes: tuple = (1, 2, 4, 8)
    decode: dict = field(default_factory=dict)
    seed: int = 0
    dtype: str = "float32"
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        self.slot_sizes = tuple(int(k) for k in self.slot_sizes)
        if not self.slot_sizes or min(self.slot_sizes) < 1:
            raise ValueError("slot_sizes must be positive")

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def decode_preset(self, name: str) -> DecodeConfig:
        if name in self.decode:
            return DecodeConfig(**self.decode[name])
        if name in PRESETS:
            return PRESETS[name]
        raise KeyError(f"unknown decode preset {name!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slot_sizes"] = list(self.slot_sizes)
        return d

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls(**json.load(f))


@dataclass
class TrainResult:
    model: Transformer
    optimizer: torch.optim.Optimizer
    losses: list[tuple[int, float, float, float]]
    train: list[dict]
    eval: list[dict]
    seconds: float

    def final_epoch_loss(self, n_train: int, batch_size: int) -> float:
        """Mean total loss over the last ``n_train / batch_size`` steps."""
        per_epoch = max(1, n_train // batch_size)
        tail = self.losses[-per_epoch:]
        return float(np.mean([x[3] for x in tail])) if tail else float("nan")


def _small(d_model: int, n_layers: int) -> dict:
    return dict(d_model=d_model, n_layers=n_layers, n_heads=4, d_ff=4 * d_model, max_position=64)


# Desk-scale runs sized to converge on one CPU core in a few minutes each.
TOY_RUNS = {
    "copy": dict(task="copy", model=_small(64, 2), steps=3000),
    "reverse": dict(task="reverse", model=_small(96, 2), steps=5000),
    "modsum-chain": dict(task="modsum-chain", model=_small(64, 2), steps=4000, len_min=8, len_max=16),
}


def toy_run(task: str, **overrides) -> RunConfig:
    """Known-good small run for ``task``; keyword overrides win."""
    if task not in TOY_RUNS:
        raise KeyError(f"no toy run for {task!r}; choose from {sorted(TOY_RUNS)}")
    return RunConfig(**{**TOY_RUNS[task], "out_dir": f"runs/{task}", **overrides})


def make_corpora(cfg: RunConfig) -> tuple[list[dict], list[dict]]:
    mc = cfg.model_config
    kw = dict(vocab_size=mc.vocab_size, base=cfg.base, max_position=mc.max_position)
    train = gen_corpus(cfg.task, cfg.n_train, (cfg.len_min, cfg.len_max), cfg.seed, **kw)
    evals = gen_corpus(cfg.task, cfg.n_eval, (cfg.len_min, cfg.len_max), cfg.seed + 1_000_003, **kw)
    return train, evals


def train(cfg: RunConfig, progress: bool = False) -> TrainResult:
    """Train from scratch; fully determined by ``cfg`` (including its seed)."""
    t0 = time.time()
    torch.use_deterministic_algorithms(True)
    dtype = DTYPES[cfg.dtype]
    mc = cfg.model_config
    train_set, eval_set = make_corpora(cfg)
    model = build_model(mc, seed=cfg.seed, dtype=dtype)
    opt, sched = make_optimizer(model, lr=cfg.lr, warmup=cfg.warmup)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for step in range(cfg.steps):
        idx = rng.integers(len(train_set), size=cfg.batch_size)
        insts = [
            sample_instance(
                train_set[i]["prompt"],
                train_set[i]["response"],
                cfg.slot_sizes,
                rng,
                mask_id=mc.mask_id,
                pad_id=mc.pad_id,
            )
            for i in idx
        ]
        batch = collate(insts, mc.pad_id)
        parts = {}

        def loss_fn(logits):
            arm, mdm, total = batch_losses(logits, batch, cfg.lam)
            parts["arm"], parts["mdm"] = float(arm.detach()), float(mdm.detach())
            # lam == 0: the denoising term is logged but kept out of the graph
            return arm if cfg.lam == 0 else total

        total = train_step(model, opt, batch.tokens, batch.positions, loss_fn, sched, step=step)
        losses.append((step, parts["arm"], parts["mdm"], parts["arm"] + cfg.lam * parts["mdm"]))
        if progress and (step % 200 == 0 or step == cfg.steps - 1):
            log.info("step %d arm %.4f mdm %.4f total %.4f", step, parts["arm"], parts["mdm"], total)
    model.eval()
    return TrainResult(model, opt, losses, train_set, eval_set, time.time() - t0)


def loss_csv(losses) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["step", "arm", "mdm", "total"])
    for step, arm, mdm, total in losses:
        w.writerow([step, repr(arm), repr(mdm), repr(total)])
    return buf.getvalue()


def cmd_train(cfg: RunConfig, out_dir=None, progress: bool = False) -> TrainResult:
    """Train and write corpora, checkpoint, loss log and the run config."""
    out = Path(out_dir or cfg.out_dir)
    res = train(cfg, progress=progress)
    write_jsonl(out / "train.jsonl", res.train)
    write_jsonl(out / "eval.jsonl", res.eval)
    atomic_write_text(out / "losses.csv", loss_csv(res.losses))
    atomic_write_text(out / "config.json", json.dumps(cfg.to_dict(), indent=1))
    save_checkpoint(out / "checkpoint", res.model, res.optimizer, step=cfg.steps, meta={"task": cfg.task})
    return res
