"""Self-describing binary checkpoint: ``RDCK`` magic, JSON header, raw float64 values."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nets import ModelConfig, Params

MAGIC = b"RDCK"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


@dataclass
class Checkpoint:
    model: ModelConfig
    params: Params
    meta: dict = field(default_factory=dict)


def encode(ckpt: Checkpoint) -> bytes:
    manifest, offset, blobs = [], 0, []
    for name, arr in ckpt.params.items():
        raw = np.ascontiguousarray(arr.value, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    header = json.dumps({"model_config": ckpt.model.to_dict(), "params": manifest,
                         "meta": ckpt.meta}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<II", VERSION, len(header)), header] + blobs)


def decode(buf: bytes, path="<bytes>") -> Checkpoint:
    if len(buf) < 12:
        raise CheckpointError(path, "truncated header")
    if buf[:4] != MAGIC:
        raise CheckpointError(path, f"bad magic {buf[:4]!r}")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(path, f"unsupported version {version}")
    if len(buf) < 12 + hlen:
        raise CheckpointError(path, "truncated header")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(path, f"unreadable header: {exc}") from None
    payload = memoryview(buf)[12 + hlen:]
    params = Params()
    end = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise CheckpointError(path, f"truncated payload at parameter {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(payload[start:start + nbytes], dtype="<f8").astype(
            np.float64).reshape(shape)
        end = max(end, start + nbytes)
    if end != len(payload):
        raise CheckpointError(path, f"{len(payload) - end} trailing bytes")
    return Checkpoint(ModelConfig.from_dict(header["model_config"]), params, header.get("meta", {}))


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes(), path)
