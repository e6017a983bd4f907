"""Checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"CADRCKPT"
    4 bytes   uint32 format version
    4 bytes   uint32 header length L
    L bytes   UTF-8 JSON header: {"format_version", "config", "meta",
              "tensors": [{"name", "shape", "dtype"}, ...]}
    ...       tensor payloads in header order, float32 ("f32") or int64 ("i64")

The header is written with sorted keys and no whitespace so that equal
models produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import DataError, MissingFile

MAGIC = b"CADRCKPT"
FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "i64": np.dtype("<i8")}


def _encode(t: torch.Tensor):
    arr = t.detach().cpu().numpy()
    if np.issubdtype(arr.dtype, np.floating):
        return "f32", arr.astype("<f4")
    return "i64", arr.astype("<i8")


def save_checkpoint(path, model: torch.nn.Module, config: dict, meta: dict | None = None) -> None:
    entries, blobs = [], []
    for name, t in model.state_dict().items():
        dtype, arr = _encode(t)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(np.ascontiguousarray(arr).tobytes())
    header = {"format_version": FORMAT_VERSION, "config": config, "meta": meta or {}, "tensors": entries}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path):
    """Return ``(header, {name: numpy array})``."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"checkpoint not found: {path}", stage="checkpoint")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path} is not a checkpoint file", stage="checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}", stage="checkpoint")
    header = json.loads(data[16:16 + hlen].decode())
    offset = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(e["shape"])
        tensors[e["name"]] = arr.copy()
        offset += count * dt.itemsize
    if offset != len(data):
        raise DataError(f"{path}: trailing or missing payload bytes", stage="checkpoint")
    return header, tensors


def load_state(model: torch.nn.Module, tensors: dict) -> None:
    state = model.state_dict()
    missing = set(state) - set(tensors)
    extra = set(tensors) - set(state)
    if missing or extra:
        raise DataError(f"checkpoint does not match model (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})",
                        stage="checkpoint")
    new = {}
    for name, ref in state.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise DataError(f"checkpoint tensor {name} has shape {arr.shape}, model expects {tuple(ref.shape)}",
                            stage="checkpoint")
        new[name] = torch.from_numpy(arr).to(ref.dtype)
    model.load_state_dict(new)
