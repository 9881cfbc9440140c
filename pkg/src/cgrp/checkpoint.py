"""Single-file checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"CGRPCKPT"
    u32       format version (currently 1)
    u32       header length N
    N bytes   UTF-8 JSON header (sorted keys, compact separators)
    ...       tensor payload, blocks concatenated in header order

The header holds ``step``, ``stages`` (completed training stages),
``configs`` (echo of every sub-network configuration), free-form ``extra``
and ``tensors``: a list of ``{name, dtype, shape, offset, nbytes}`` entries
with offsets relative to the payload start. Writing is deterministic, so a
save -> load -> save round trip reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CGRPCKPT"
VERSION = 1
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict
    step: int = 0
    stages: list = field(default_factory=list)
    configs: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def block(self, prefix: str) -> dict:
        """Tensors whose name starts with ``prefix + '.'`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for name in sorted(self.tensors):
            t = self.tensors[name].detach().cpu().contiguous()
            if t.dtype not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
            data = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes(order="C")
            entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                            "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
        header = {"step": int(self.step), "stages": list(self.stages), "configs": self.configs,
                  "extra": self.extra, "tensors": entries}
        raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<II", VERSION, len(raw)) + raw + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<II", data[8:16])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
        base = 16 + hlen
        tensors = {}
        for e in header["tensors"]:
            start = base + e["offset"]
            arr = np.frombuffer(data[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
            tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy()).to(_TORCH[e["dtype"]])
        return cls(tensors, header["step"], header["stages"], header["configs"], header["extra"])


def atomic_write(path, data: bytes) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    atomic_write(path, ckpt.to_bytes())
    return Path(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return Checkpoint.from_bytes(path.read_bytes())
