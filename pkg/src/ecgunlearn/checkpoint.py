"""Binary model checkpoints.

Layout::

    b"UNLRN1"                      magic
    u64 little-endian              header length in bytes
    header (UTF-8 JSON)            version, mode, model config, tensor table
    payload                        raw '<f8' tensors in header order

Running batch-norm statistics are stored as tensors named
``<bn>.running_mean`` / ``<bn>.running_var`` next to the parameters.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import RunningStats, Tensor
from .model import BN_MOMENTUM, Model, ModelConfig

MAGIC = b"UNLRN1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensors(model: Model):
    for name in sorted(model.params):
        yield name, "param", model.params[name].data
    for name in sorted(model.stats):
        yield f"{name}.running_mean", "running_mean", model.stats[name].mean
        yield f"{name}.running_var", "running_var", model.stats[name].var


def checkpoint_bytes(model: Model) -> bytes:
    table, payload = [], []
    for name, kind, arr in _tensors(model):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "kind": kind, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = json.dumps({
        "version": VERSION,
        "mode": "train" if model.training else "eval",
        "config": model.config.to_dict(),
        "tensors": table,
    }, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(payload)


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    return path


def model_from_bytes(blob: bytes, source: str = "<bytes>") -> Model:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: bad magic")
    off = len(MAGIC)
    if len(blob) < off + 8:
        raise CheckpointError(f"{source}: truncated header length")
    (hlen,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if len(blob) < off + hlen:
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(blob[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header ({exc})") from None
    off += hlen
    if header.get("version") != VERSION:
        raise CheckpointError(f"{source}: version mismatch (file {header.get('version')!r}, "
                              f"expected {VERSION})")
    table = header["tensors"]
    expected = sum(8 * int(np.prod(t["shape"], dtype=np.int64)) for t in table)
    if len(blob) - off > expected:
        raise CheckpointError(f"{source}: header/payload size disagreement "
                              f"({len(blob) - off} payload bytes, header declares {expected})")
    config = ModelConfig(**header["config"])
    params, stats = {}, {}
    for t in table:
        n = int(np.prod(t["shape"], dtype=np.int64))
        if len(blob) < off + 8 * n:
            raise CheckpointError(f"{source}: truncated payload in tensor {t['name']!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(t["shape"]).astype(np.float64)
        off += 8 * n
        if t["kind"] == "param":
            params[t["name"]] = Tensor(arr, requires_grad=True, name=t["name"])
        else:
            bn = t["name"].rsplit(".", 1)[0]
            rs = stats.setdefault(bn, RunningStats(len(arr), BN_MOMENTUM))
            if t["kind"] == "running_mean":
                rs.mean = arr
            else:
                rs.var = arr
    return Model(config, params, stats, header.get("mode") == "train")


def load_checkpoint(path) -> Model:
    path = Path(path)
    return model_from_bytes(path.read_bytes(), str(path))
