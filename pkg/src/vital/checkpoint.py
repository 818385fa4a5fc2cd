"""Versioned single-file checkpoint container.

Layout::

    b"VITAL-CKPT-1\\n"                      magic / format id
    uint64 little-endian                    header length in bytes
    header (UTF-8 JSON, sorted keys)        phase, meta, array directory
    raw little-endian array bytes           in directory order

No timestamps are written, so identical contents give identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from vital.errors import CheckpointFormatError

FORMAT_ID = "VITAL-CKPT-1"
MAGIC = (FORMAT_ID + "\n").encode()


@dataclass
class Checkpoint:
    phase: str
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> dict:
        return self.meta.get("config", {})

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.arrays.items() if k.startswith(prefix)}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    directory, blobs, offset = [], [], 0
    for name, arr in ckpt.arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        directory.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format": FORMAT_ID, "phase": ckpt.phase, "meta": ckpt.meta,
                         "arrays": directory}, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    head = data[: len(MAGIC)]
    if head != MAGIC:
        actual = head.split(b"\n")[0].decode("ascii", errors="replace")
        raise CheckpointFormatError(FORMAT_ID, actual)
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos: pos + 8])
    pos += 8
    header = json.loads(data[pos: pos + hlen].decode())
    if header.get("format") != FORMAT_ID:
        raise CheckpointFormatError(FORMAT_ID, header.get("format"))
    base = pos + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        buf = data[start: start + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise CheckpointFormatError(FORMAT_ID, "truncated file")
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return Checkpoint(phase=header["phase"], arrays=arrays, meta=header["meta"])


# -- torch helpers -------------------------------------------------------------

def module_arrays(module: torch.nn.Module, prefix="") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix=""):
    state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state, strict=True)


def torch_rng_state(gen: torch.Generator) -> np.ndarray:
    return gen.get_state().numpy().copy()


def set_torch_rng_state(gen: torch.Generator, state: np.ndarray):
    gen.set_state(torch.from_numpy(np.asarray(state, dtype=np.uint8).copy()))
