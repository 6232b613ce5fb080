"""Checkpoint format: a little-endian tensor blob plus a JSON manifest.

Each blob record is ``u32 name_len | name (utf-8) | u8 dtype | u32 rank |
u64 dims[rank] | row-major data``. The manifest holds the model config, the
step counter and an index of record and data offsets.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import ModelConfig, Transformer

FORMAT = "slotdiff-checkpoint"
VERSION = 1
BLOB = "tensors.bin"
MANIFEST = "manifest.json"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    opt_state: dict[str, torch.Tensor]
    config: ModelConfig
    step: int = 0
    meta: dict = field(default_factory=dict)

    def build_model(self, dtype=None) -> Transformer:
        model = Transformer(self.config)
        model.load_state_dict(self.params)
        if dtype is not None:
            model = model.to(dtype)
        else:
            model = model.to(next(iter(self.params.values())).dtype)
        return model


def _record(name: str, arr: np.ndarray) -> tuple[bytes, bytes]:
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _TAGS:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", _TAGS[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head, arr.astype(dt, copy=False).tobytes()


def optimizer_tensors(model: Transformer, optimizer) -> dict[str, torch.Tensor]:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p, {})
            for key in ("exp_avg", "exp_avg_sq"):
                if key in st:
                    out[f"opt/{names[id(p)]}/{key}"] = st[key].detach()
    return out


def load_optimizer_tensors(model: Transformer, optimizer, opt_state: dict[str, torch.Tensor], step: int):
    for name, p in model.named_parameters():
        keys = (f"opt/{name}/exp_avg", f"opt/{name}/exp_avg_sq")
        if all(k in opt_state for k in keys):
            optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": opt_state[keys[0]].clone().to(p.dtype),
                "exp_avg_sq": opt_state[keys[1]].clone().to(p.dtype),
            }


def save_checkpoint(path, model: Transformer, optimizer=None, step: int = 0, meta: dict | None = None) -> Path:
    """Write ``path/`` atomically (build in a temp dir, then rename)."""
    path = Path(path)
    tensors = {n: t.detach().cpu() for n, t in model.state_dict().items()}
    if optimizer is not None:
        tensors.update({n: t.cpu() for n, t in optimizer_tensors(model, optimizer).items()})
    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.numpy()
        head, data = _record(name, arr)
        index.append(
            {
                "name": name,
                "offset": offset,
                "data_offset": offset + len(head),
                "nbytes": len(data),
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
            }
        )
        chunks += [head, data]
        offset += len(head) + len(data)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.cfg.to_dict(),
        "step": int(step),
        "blob_bytes": offset,
        "tensors": index,
        "meta": meta or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        (tmp / BLOB).write_bytes(b"".join(chunks))
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1))
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path, config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; ``config`` if given must match the stored one."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as e:
        raise CheckpointError(f"no manifest in {path}") from e
    except json.JSONDecodeError as e:
        raise CheckpointTruncatedError(f"unreadable manifest in {path}: {e}") from e
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointVersionError(
            f"expected {FORMAT} v{VERSION}, found {manifest.get('format')} v{manifest.get('version')}"
        )
    stored = ModelConfig.from_dict(manifest["config"])
    if config is not None and config != stored:
        diff = {k: (v, getattr(config, k)) for k, v in stored.to_dict().items() if getattr(config, k) != v}
        raise ConfigMismatchError(f"checkpoint config differs (stored, requested): {diff}")
    blob = (path / BLOB).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointTruncatedError(f"blob has {len(blob)} bytes, manifest expects {manifest['blob_bytes']}")
    params, opt = {}, {}
    for entry in manifest["tensors"]:
        name, arr = _parse_record(blob, entry["offset"])
        if name != entry["name"] or list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"blob record at {entry['offset']} does not match manifest entry {entry['name']}")
        t = torch.from_numpy(arr.copy())
        (opt if name.startswith("opt/") else params)[name] = t
    return Checkpoint(params, opt, stored, int(manifest["step"]), manifest.get("meta", {}))


def _parse_record(blob: bytes, off: int):
    try:
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + n].decode()
        off += n
        tag, rank = struct.unpack_from("<BI", blob, off)
        off += 5
        dims = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
    except struct.error as e:
        raise CheckpointTruncatedError(f"truncated record header at byte {off}") from e
    if tag not in _DTYPES:
        raise CheckpointError(f"unknown dtype tag {tag} for {name}")
    dt = _DTYPES[tag]
    size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if off + size > len(blob):
        raise CheckpointTruncatedError(f"record {name} runs past the end of the blob")
    arr = np.frombuffer(blob, dtype=dt, count=size // dt.itemsize, offset=off).reshape(dims)
    return name, arr
