"""Versioned binary checkpoints.

Layout (little-endian)::

    b"PMPC" | u16 version | 32-byte sha256 of the config JSON | u64 step | u64 epoch
    | u32 len + RNG state JSON | u32 len + config JSON | u32 len + extra JSON
    | u32 n_tensors | per tensor: u16 name_len | name | u8 dtype (0=f32, 1=f64)
                                  | u8 ndim | u32 dims[ndim] | raw data
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PMPC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ConfigMismatch(ValueError):
    pass


@dataclass
class Checkpoint:
    config_json: str
    digest: bytes
    step: int
    epoch: int
    rng_state: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        def blob(obj) -> bytes:
            raw = obj.encode() if isinstance(obj, str) else json.dumps(obj, sort_keys=True).encode()
            return struct.pack("<I", len(raw)) + raw

        parts = [MAGIC, struct.pack("<H", VERSION), self.digest, struct.pack("<QQ", self.step, self.epoch),
                 blob(self.rng_state), blob(self.config_json), blob(self.extra),
                 struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            code = 1 if arr.dtype == np.float64 else 0
            arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
            raw = name.encode()
            parts += [struct.pack("<H", len(raw)), raw, struct.pack("<BB", code, arr.ndim),
                      struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise ValueError("not a PMPC checkpoint")
        (version,) = struct.unpack_from("<H", buf, 4)
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        digest = buf[6:38]
        step, epoch = struct.unpack_from("<QQ", buf, 38)
        pos = 54

        def blob():
            nonlocal pos
            (n,) = struct.unpack_from("<I", buf, pos)
            raw = buf[pos + 4:pos + 4 + n].decode()
            pos += 4 + n
            return raw

        rng_state = json.loads(blob())
        config_json = blob()
        extra = json.loads(blob())
        (n_tensors,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(n_tensors):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            count = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape).copy()
            pos += count * dt.itemsize
        return cls(config_json, digest, step, epoch, rng_state, tensors, extra)

    def save(self, path: str | Path) -> None:
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def check_config(self, digest: bytes) -> None:
        if digest != self.digest:
            raise ConfigMismatch("checkpoint was written under a different configuration")
