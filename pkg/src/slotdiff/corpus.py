"""Synthetic prompt/response tasks with machine-checkable answers."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

TASKS = ("copy", "reverse", "modsum-chain")
SEP_ID = 4
FIRST_SYMBOL = 5  # 0..3 are pad, mask, eos, bos


def task_answer(task: str, payload: Sequence[int], base: int = 7) -> list[int]:
    """Answer in symbol space (values, not token ids)."""
    if task == "copy":
        return list(payload)
    if task == "reverse":
        return list(payload)[::-1]
    if task == "modsum-chain":
        out, acc = [], 0
        for x in payload:
            acc = (acc + x) % base
            out.append(acc)
        return out
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def encode_sample(
    task: str,
    payload: Sequence[int],
    bos_id: int = 3,
    eos_id: int = 2,
    base: int = 7,
    width: int | None = None,
    pad_id: int = 0,
) -> dict:
    """Token ids for one sample. ``width`` pads the payload (after it, before
    the separator) so every answer token sits a fixed distance from its
    payload symbol."""
    body = [FIRST_SYMBOL + x for x in payload]
    if width is not None:
        if width < len(body):
            raise ValueError(f"payload of {len(body)} does not fit width {width}")
        body += [pad_id] * (width - len(body))
    prompt = [bos_id] + body + [SEP_ID]
    response = [FIRST_SYMBOL + x for x in task_answer(task, payload, base)] + [eos_id]
    return {"prompt": prompt, "response": response}


def gen_corpus(
    task: str,
    n_samples: int,
    length_range: tuple[int, int],
    seed: int,
    vocab_size: int = 32,
    base: int = 7,
    max_position: int = 512,
) -> list[dict]:
    """Samples ``{"prompt": [...], "response": [...]}`` drawn from ``seed``.

    Payload symbols are drawn uniformly from the available alphabet (all
    non-special tokens for copy/reverse, ``range(base)`` for modsum-chain).
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad length range {length_range}")
    if 2 * hi + 3 > max_position:
        raise ValueError(f"payload length {hi} does not fit in max_position={max_position}")
    n_sym = base if task == "modsum-chain" else vocab_size - FIRST_SYMBOL
    if n_sym < 2 or FIRST_SYMBOL + n_sym > vocab_size:
        raise ValueError(f"task alphabet of {n_sym} symbols does not fit vocab_size={vocab_size}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_samples):
        n = int(rng.integers(lo, hi + 1))
        payload = rng.integers(0, n_sym, size=n).tolist()
        # running sums have no content cue linking answer to payload, so the
        # prompt is fixed-width to make the alignment purely positional
        width = hi if task == "modsum-chain" else None
        out.append(encode_sample(task, payload, base=base, width=width))
    return out


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_jsonl(path, rows: Sequence[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(r) + "\n" for r in rows))


def read_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
