"""File formats: the binary tensor container, dataset manifests, config hashing.

The tensor container is deliberately minimal so round trips are bit-exact:

    magic   4 bytes  "ERAT"
    version u8       1
    dtype   u8       1 = uint8, 2 = float32, 3 = float64
    ndim    u8
    dims    ndim x u32, little-endian
    payload little-endian, row-major, last dimension fastest

Writes are whole-file atomic (temp file + rename in the same directory).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"ERAT"
VERSION = 1

_DTYPE_CODES = {1: np.dtype("uint8"), 2: np.dtype("<f4"), 3: np.dtype("<f8")}
_CODE_FOR_KIND = {"uint8": 1, "float32": 2, "float64": 3}


class TensorFormatError(Exception):
    """Base class for tensor-container format violations."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class UnknownDtypeError(TensorFormatError):
    pass


class TruncatedFileError(TensorFormatError):
    pass


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write ``payload`` to ``path`` atomically (temp file + rename)."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path: str | Path, tensor: np.ndarray) -> None:
    """Serialize an array of dtype uint8/float32/float64 to ``path``."""
    arr = np.ascontiguousarray(tensor)
    code = _CODE_FOR_KIND.get(arr.dtype.name)
    if code is None:
        raise UnknownDtypeError(f"unsupported dtype {arr.dtype} (use uint8/float32/float64)")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    atomic_write_bytes(path, header + payload)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor container, validating magic, version, dtype and length."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 7:
        raise TruncatedFileError(f"{path}: header truncated")
    version, code, ndim = struct.unpack("<BBB", blob[4:7])
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}")
    if code not in _DTYPE_CODES:
        raise UnknownDtypeError(f"{path}: dtype code {code}")
    dims_end = 7 + 4 * ndim
    if len(blob) < dims_end:
        raise TruncatedFileError(f"{path}: dims truncated")
    dims = struct.unpack(f"<{ndim}I", blob[7:dims_end])
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = blob[dims_end:]
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: payload {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise TensorFormatError(f"{path}: {len(payload) - expected} trailing bytes")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)


def canonical_json(obj: Any) -> str:
    """JSON with sorted keys and fixed separators; key order cannot leak in."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    """sha256 over the canonical JSON encoding of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def write_json(path: str | Path, obj: Any) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_json(path: str | Path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def export_pgm(path: str | Path, tensor: np.ndarray) -> None:
    """Dump a 2D tensor as binary PGM (P5, 8-bit, min-max scaled)."""
    arr = np.asarray(tensor)
    if arr.ndim != 2:
        raise ValueError(f"export_pgm needs a 2D tensor, got ndim={arr.ndim}")
    arr = arr.astype(np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        scaled = np.round((arr - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(arr)
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + scaled.astype(np.uint8).tobytes())


@dataclass
class ManifestEntry:
    """One dataset item: image path, optional label path, split membership."""

    item_id: str
    image: str
    label: str | None
    split: str  # "train" | "test"
    labeled: bool
    eval_only_label: bool = False

    def to_dict(self) -> dict:
        return {
            "id": self.item_id,
            "image": self.image,
            "label": self.label,
            "split": self.split,
            "labeled": self.labeled,
            "eval_only_label": self.eval_only_label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(
            item_id=d["id"],
            image=d["image"],
            label=d.get("label"),
            split=d["split"],
            labeled=bool(d["labeled"]),
            eval_only_label=bool(d.get("eval_only_label", False)),
        )


@dataclass
class Manifest:
    """Dataset index: named entries with train/test split and labeled flags."""

    name: str
    seed: int
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [e.item_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids must be unique")
        for e in self.entries:
            if e.labeled and e.label is None:
                raise ValueError(f"{e.item_id}: labeled entry without a label path")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "entries": [e.to_dict() for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        return cls(
            name=d["name"],
            seed=int(d["seed"]),
            entries=[ManifestEntry.from_dict(e) for e in d["entries"]],
        )

    def save(self, path: str | Path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        return cls.from_dict(read_json(path))

    def select(self, *, split: str | None = None, labeled: bool | None = None) -> list[ManifestEntry]:
        out = []
        for e in self.entries:
            if split is not None and e.split != split:
                continue
            if labeled is not None and e.labeled != labeled:
                continue
            out.append(e)
        return out
