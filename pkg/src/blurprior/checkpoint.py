"""Single-file checkpoint: magic, JSON header, then raw little-endian arrays.

Layout::

    b"BPCKPT1\\n" | uint64 header length | header JSON (sorted keys) | array bytes

The header carries ``tensors`` (name -> dtype, shape, offset, nbytes) and a
free-form ``meta`` object (config echo, provenance, rng state).  Arrays are
written in sorted name order, so loading and re-saving is byte-stable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"BPCKPT1\n"


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def provenance(self) -> list[dict]:
        return self.meta.setdefault("provenance", [])

    def append_provenance(self, record: dict) -> None:
        self.meta["provenance"] = list(self.provenance) + [dict(record)]

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        n = len(prefix)
        return {k[n:]: torch.from_numpy(v.copy()) for k, v in self.arrays.items() if k.startswith(prefix)}


def state_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def to_bytes(ckpt: Checkpoint) -> bytes:
    index = {}
    blobs = []
    offset = 0
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])  # keeps 0-d shapes, unlike ascontiguousarray
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        index[name] = {"dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": index, "meta": ckpt.meta}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def from_bytes(data: bytes) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise ValueError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + hlen])
    base = start + hlen
    arrays = {}
    for name, info in header["tensors"].items():
        lo = base + info["offset"]
        arr = np.frombuffer(data[lo:lo + info["nbytes"]], dtype=np.dtype(info["dtype"]))
        arrays[name] = arr.reshape(tuple(info["shape"])).copy()
    return Checkpoint(arrays, header["meta"])


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
