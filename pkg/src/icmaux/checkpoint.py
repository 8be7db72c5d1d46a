"""Self-describing binary checkpoint container.

Layout: one version byte, the magic ``ICMK``, a little-endian u32 header
length, a UTF-8 JSON header, then raw little-endian float32 blobs.  The header
lists every blob's name, group, shape and byte offset, plus free-form
architecture hyperparameters and metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .layers import Module

VERSION = 1
MAGIC = b"ICMK"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    hparams: dict
    meta: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)  # name -> np.ndarray
    groups: dict = field(default_factory=dict)  # name -> group

    def module_state(self, prefix: str) -> dict:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def has_module(self, prefix: str) -> bool:
        return any(k.startswith(prefix + "/") for k in self.tensors)

    def without_module(self, prefix: str) -> "Checkpoint":
        keep = {k: v for k, v in self.tensors.items() if not k.startswith(prefix + "/")}
        return Checkpoint(dict(self.hparams), dict(self.meta), keep, {k: self.groups[k] for k in keep})


def pack(modules: dict, hparams: dict, meta: dict | None = None) -> Checkpoint:
    ck = Checkpoint(hparams, meta or {})
    for prefix, mod in modules.items():
        if mod is None:
            continue
        assert isinstance(mod, Module)
        for name, p in mod.named_parameters():
            key = f"{prefix}/{name}"
            ck.tensors[key] = p.data.copy()
            ck.groups[key] = p.group
    return ck


def save(path: str, ck: Checkpoint) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in ck.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "group": ck.groups.get(name, ""), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"hparams": ck.hparams, "meta": ck.meta, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(bytes([VERSION]))
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 9:
        raise CheckpointError(f"{path}: file too short")
    if data[0] != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {data[0]}")
    if data[1:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (hlen,) = struct.unpack_from("<I", data, 5)
    header = json.loads(data[9:9 + hlen].decode("utf-8"))
    base = 9 + hlen
    ck = Checkpoint(header["hparams"], header.get("meta", {}))
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: blob {e['name']} truncated")
        ck.tensors[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        ck.groups[e["name"]] = e["group"]
    return ck
