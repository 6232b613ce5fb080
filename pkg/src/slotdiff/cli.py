"""Command line entry point: ``slotdiff <command> ...``.

Outputs go under ``--out`` when given, otherwise under ``$SLOTDIFF_OUT``
(default ``./runs``). Every file is written atomically, and a failing command
leaves nothing behind.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .corpus import TASKS, atomic_write_text, gen_corpus, read_jsonl, write_jsonl
from .decoder import PRESETS, decode
from .evaluate import rows_csv, sweep
from .probe import dependency_probe, write_curves_csv
from .render import render_svg
from .training import RunConfig, cmd_train

OUT_ENV = "SLOTDIFF_OUT"


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x]


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x]


def _preset(args, **fixed):
    if args.preset not in PRESETS:
        raise ValueError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[args.preset]
    over = {
        "tau_slot": getattr(args, "tau_slot", None),
        "tau_token": getattr(args, "tau_token", None),
        "k": getattr(args, "k", None),
        "b": getattr(args, "b", None),
        "max_len": getattr(args, "max_len", None),
        "cache_mode": getattr(args, "cache_mode", None),
        "draft_mode": getattr(args, "draft_mode", None),
        "temperature": getattr(args, "temperature", None),
        "seed": getattr(args, "seed", None),
    }
    over.update(fixed)
    return replace(cfg, **{k: v for k, v in over.items() if v is not None})


def _model(path):
    return load_checkpoint(path).build_model().eval()


def run_train(args):
    cfg = RunConfig.from_json(args.config)
    out = Path(args.out) if args.out else out_root() / Path(cfg.out_dir).name
    res = cmd_train(cfg, out_dir=out, progress=True)
    print(f"trained {cfg.steps} steps in {res.seconds:.1f}s -> {out}")


def run_gen_corpus(args):
    rows = gen_corpus(
        args.task, args.n, (args.min_len, args.max_len), args.seed, vocab_size=args.vocab_size, base=args.base
    )
    out = Path(args.out) if args.out else out_root() / f"{args.task}.jsonl"
    write_jsonl(out, rows)
    print(f"wrote {len(rows)} samples -> {out}")


def run_decode(args):
    cfg = _preset(args)
    model = _model(args.ckpt)
    prompts = read_jsonl(args.prompts)
    out = Path(args.out) if args.out else out_root() / "decode"
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        rows = []
        (tmp / "traces").mkdir()
        for i, p in enumerate(prompts):
            res = decode(model, p["prompt"], cfg)
            rows.append({"prompt": p["prompt"], "response": res.response, "truncated": res.truncated})
            (tmp / "traces" / f"{i:05d}.json").write_text(res.trace.to_json())
        write_jsonl(tmp / "responses.jsonl", rows)
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"decoded {len(rows)} prompts -> {out}")


def run_bench(args):
    ks, bs = _ints(args.ks), _ints(args.bs)
    # the grid owns k and b; seed the base config from its first cell
    base = _preset(args, k=ks[0], b=bs[0])
    model = _model(args.ckpt)
    samples = read_jsonl(args.samples)
    if args.limit:
        samples = samples[: args.limit]
    rows = sweep(
        model,
        samples,
        base,
        tau_slot=_floats(args.tau_slots),
        tau_token=_floats(args.tau_tokens),
        k=ks,
        b=bs,
    )
    out = Path(args.out) if args.out else out_root() / "bench.csv"
    atomic_write_text(out, rows_csv(rows))
    print(f"{len(rows)} cells -> {out}")


def run_probe(args):
    model = _model(args.ckpt)
    corpus = [(r["prompt"], r["response"]) for r in read_jsonl(args.corpus)]
    curves = dependency_probe(model, corpus, _floats(args.t_levels), args.samples, np.random.default_rng(args.seed))
    out = Path(args.out) if args.out else out_root() / "locality.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out.parent, prefix=f".{out.name}.")
    os.close(fd)
    try:
        write_curves_csv(curves, tmp)
        os.replace(tmp, out)
    except BaseException:
        os.unlink(tmp)
        raise
    print(f"probe curves -> {out}")


def run_render(args):
    with open(args.trace) as f:
        trace = json.load(f)
    out = Path(args.out) if args.out else Path(args.trace).with_suffix(".svg")
    atomic_write_text(out, render_svg(trace, row_len=args.row_len))
    print(f"rendered -> {out}")


def _decode_opts(p):
    p.add_argument("--preset", default="toy")
    p.add_argument("--tau-slot", type=float)
    p.add_argument("--tau-token", type=float)
    p.add_argument("-k", type=int)
    p.add_argument("-b", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--cache-mode", choices=["concat", "recompute"])
    p.add_argument("--draft-mode", choices=["greedy", "sampled"])
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slotdiff", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=run_train)

    p = sub.add_parser("gen-corpus", help="write a synthetic JSONL corpus")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=32)
    p.add_argument("--base", type=int, default=7)
    p.add_argument("--out")
    p.set_defaults(fn=run_gen_corpus)

    p = sub.add_parser("decode", help="decode prompts with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--out")
    _decode_opts(p)
    p.set_defaults(fn=run_decode)

    p = sub.add_parser("bench", help="accuracy/TPF over a hyperparameter grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--tau-slots", default="0.6")
    p.add_argument("--tau-tokens", default="0.3")
    p.add_argument("--ks", default="4")
    p.add_argument("--bs", default="16")
    p.add_argument("--limit", type=int)
    p.add_argument("--out")
    _decode_opts(p)
    p.set_defaults(fn=run_bench)

    p = sub.add_parser("probe", help="dependency-locality curves as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--t-levels", default="0.3,0.5,0.8")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=run_probe)

    p = sub.add_parser("render", help="SVG heatmap of a decode trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--row-len", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=run_render)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (ValueError, KeyError, CheckpointError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"slotdiff {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
