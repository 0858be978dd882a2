"""Graph examples, packing into batches, and the PMPD dataset container.

Container layout (little-endian)::

    b"PMPD" | u16 version | u32 n_records
    per record: u32 byte_length | u16 n_arrays
        per array: u16 name_len | name (utf-8) | u8 ndim | u32 dims[ndim] | f32 payload

A JSON sidecar (``<path>.json``) records the task, generation params and array shapes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import GraphTopology, batch

MAGIC = b"PMPD"
VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(eq=False)
class Example:
    """One graph with node features, node targets and the supervised-node mask.

    ``node_split`` (transductive tasks) tags every node with 0/1/2 for
    train/val/test, or -1 when unused.
    """

    features: np.ndarray
    topo: GraphTopology
    targets: np.ndarray
    mask: np.ndarray
    split: str = "train"
    node_split: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.topo.n_nodes

    def masked(self, split: str) -> "Example":
        """Same graph with supervision restricted to ``split`` nodes (transductive use)."""
        if self.node_split is None:
            return self
        mask = self.mask & (self.node_split == SPLITS.index(split))
        return Example(self.features, self.topo, self.targets, mask, split, self.node_split, self.info)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {
            "features": self.features,
            "edges": self.topo.edges,
            "targets": self.targets,
            "mask": self.mask,
            "split": np.array([SPLITS.index(self.split)]),
            "n_nodes": np.array([self.n_nodes]),
        }
        if self.node_split is not None:
            out["node_split"] = self.node_split
        for key, val in self.info.items():
            out["info." + key] = np.atleast_1d(np.asarray(val))
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "Example":
        n = int(arrays["n_nodes"][0])
        info = {k[5:]: _scalar(v) for k, v in arrays.items() if k.startswith("info.")}
        node_split = arrays.get("node_split")
        return cls(
            features=arrays["features"],
            topo=GraphTopology(n, arrays["edges"].astype(np.int64).reshape(-1, 2)),
            targets=arrays["targets"].astype(np.int64),
            mask=arrays["mask"].astype(bool),
            split=SPLITS[int(arrays["split"][0])],
            node_split=None if node_split is None else node_split.astype(np.int64),
            info=info,
        )


def _scalar(v: np.ndarray):
    if v.size == 1:
        x = float(v[0])
        return int(x) if x.is_integer() else x
    return v


def collate(examples: Sequence[Example]) -> Example:
    """Pack examples into one disjoint-union graph."""
    if len(examples) == 1:
        return examples[0]
    topo = batch([e.topo for e in examples])
    node_split = None
    if all(e.node_split is not None for e in examples):
        node_split = np.concatenate([e.node_split for e in examples])
    return Example(
        features=np.concatenate([e.features for e in examples]),
        topo=topo,
        targets=np.concatenate([e.targets for e in examples]),
        mask=np.concatenate([e.mask for e in examples]),
        split=examples[0].split,
        node_split=node_split,
        info=dict(examples[0].info),
    )


def _pack_record(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<H", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        flat = arr.astype("<f4")
        if arr.size and not np.array_equal(flat.astype(np.float64), arr.astype(np.float64)):
            raise ValueError(f"array {name!r} is not exactly representable as float32")
        parts.append(flat.tobytes())
    body = b"".join(parts)
    return struct.pack("<I", len(body)) + body


def _unpack_record(buf: memoryview) -> dict[str, np.ndarray]:
    (n_arrays,) = struct.unpack_from("<H", buf, 0)
    pos, out = 2, {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = bytes(buf[pos:pos + name_len]).decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
    return out


def save_dataset(path: str | Path, examples: Iterable[Example], task: str, params: dict) -> None:
    path = Path(path)
    examples = list(examples)
    records = [_pack_record(e.to_arrays()) for e in examples]
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(records)))
        for rec in records:
            fh.write(rec)
    first = examples[0].to_arrays() if examples else {}
    sidecar = {
        "n_classes": params.get("n_classes"),
        "format": "PMPD",
        "version": VERSION,
        "task": task,
        "params": params,
        "n_records": len(records),
        "splits": {s: sum(e.split == s for e in examples) for s in SPLITS},
        "arrays": {k: list(np.shape(v)) for k, v in first.items()},
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> tuple[list[Example], dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise ValueError(f"{path} is not a PMPD container")
    version, n_records = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported PMPD version {version}")
    view, pos, examples = memoryview(blob), 10, []
    try:
        for _ in range(n_records):
            (length,) = struct.unpack_from("<I", view, pos)
            pos += 4
            if pos + length > len(blob):
                raise ValueError(f"{path} is truncated")
            examples.append(Example.from_arrays(_unpack_record(view[pos:pos + length])))
            pos += length
    except struct.error as exc:
        raise ValueError(f"{path} is corrupt: {exc}") from None
    if pos != len(blob):
        raise ValueError(f"{path} has {len(blob) - pos} trailing bytes")
    sidecar_path = Path(str(path) + ".json")
    meta = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    return examples, meta
