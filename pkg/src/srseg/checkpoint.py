"""Single-file checkpoint container: named arrays + JSON config + metadata.

Layout: 8-byte magic, u64 header length, JSON header (sorted keys), then the
raw little-endian array payloads in header order. Writing the same content
twice produces identical bytes, so checkpoint hashes are stable provenance.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

_MAGIC = b"SRSEGCK1"


@dataclass
class Checkpoint:
    config: dict
    meta: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_state_dict(cls, state_dict: dict, config: dict, meta: dict) -> "Checkpoint":
        arrays = {k: v.detach().cpu().numpy().copy() for k, v in state_dict.items()}
        return cls(config=config, meta=meta, arrays=arrays)

    def to_state_dict(self) -> dict:
        return {k: torch.from_numpy(v.copy()) for k, v in self.arrays.items()}

    def to_bytes(self) -> bytes:
        names = sorted(self.arrays)
        entries = []
        offset = 0
        blobs = []
        for name in names:
            arr = np.ascontiguousarray(self.arrays[name])
            blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            entries.append({"name": name, "dtype": str(arr.dtype),
                            "shape": list(arr.shape), "offset": offset,
                            "nbytes": len(blob)})
            blobs.append(blob)
            offset += len(blob)
        header = json.dumps({"config": self.config, "meta": self.meta,
                             "arrays": entries}, sort_keys=True).encode()
        return b"".join([_MAGIC, struct.pack("<Q", len(header)), header, *blobs])

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no such checkpoint: {path}")
        buf = path.read_bytes()
        if buf[:8] != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack_from("<Q", buf, 8)
        header = json.loads(buf[16:16 + hlen].decode())
        data = buf[16 + hlen:]
        arrays = {}
        for e in header["arrays"]:
            raw = data[e["offset"]:e["offset"] + e["nbytes"]]
            arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
            arrays[e["name"]] = arr.copy()
        return cls(config=header["config"], meta=header["meta"], arrays=arrays)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ckpt.save(path)


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.load(path)
