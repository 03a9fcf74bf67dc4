"""Versioned single-file container for named float32 arrays.

Layout::

    b"EGOCKPT\\0"                 8-byte magic
    uint32 LE                     format version
    uint64 LE                     header length in bytes
    header                        UTF-8 JSON: kind, config, step, extra, array index
    array data                    little-endian float32, in index order

Arrays round-trip bit-exactly. Optimizer moments and the step counter are
stored alongside the parameters so a reloaded state resumes training exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"EGOCKPT\0"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: dict
    step: int
    arrays: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = [], [], 0
    for name, arr in ckpt.arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        index.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "kind": ckpt.kind,
            "config": ckpt.config,
            "step": int(ckpt.step),
            "extra": ckpt.extra,
            "arrays": index,
        },
        sort_keys=True,
    ).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(header["kind"], header["config"], header["step"], arrays, header.get("extra", {}))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# Module and optimizer (de)serialization


def module_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"param/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("param/")}
    module.load_state_dict(state, strict=True)


def optimizer_arrays(module: torch.nn.Module, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for name, p in module.named_parameters():
        st = optimizer.state.get(p)
        if not st:
            continue
        for key, val in st.items():
            out[f"optim/{name}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return out


def load_optimizer_arrays(module: torch.nn.Module, optimizer: torch.optim.Optimizer, arrays) -> None:
    for name, p in module.named_parameters():
        prefix = f"optim/{name}/"
        st = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
        if st:
            optimizer.state[p] = st
