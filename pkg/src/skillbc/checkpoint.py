"""Checkpoint container: named tensors + normalizer stats + config fingerprint.

Layout: magic "SKCK", version u16 LE, u32 header length, JSON header, then one
raw little-endian payload per tensor in header order. Training keeps float64;
checkpoints serialize float32 by default (float64 on request).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SKCK"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path, tensors: dict[str, np.ndarray], *, fingerprint: str = "",
                    normalizer: dict | None = None, meta: dict | None = None,
                    dtype: str = "float32") -> None:
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported checkpoint dtype {dtype!r}")
    np_dtype = np.dtype(_DTYPES[dtype])
    header = {
        "params": [{"name": name, "shape": list(arr.shape), "dtype": dtype}
                   for name, arr in tensors.items()],
        "fingerprint": fingerprint,
        "normalizer": normalizer,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, arr in tensors.items():
            f.write(np.ascontiguousarray(arr, dtype=np_dtype).tobytes())


class Checkpoint:
    def __init__(self, tensors, fingerprint, normalizer, meta, dtype):
        self.tensors = tensors
        self.fingerprint = fingerprint
        self.normalizer = normalizer
        self.meta = meta
        self.dtype = dtype

    def as_float64(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(v, dtype=np.float64) for k, v in self.tensors.items()}


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint file")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 6)
    if len(raw) < 10 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header: {e}") from e
    offset = 10 + hlen
    tensors: dict[str, np.ndarray] = {}
    dtype = "float32"
    for entry in header.get("params", []):
        name, shape, dtype = entry["name"], tuple(entry["shape"]), entry["dtype"]
        if dtype not in _DTYPES:
            raise FormatError(f"{path}: tensor {name!r} has unknown dtype {dtype!r}")
        np_dtype = np.dtype(_DTYPES[dtype])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: payload for {name!r} is truncated")
        arr = np.frombuffer(raw, dtype=np_dtype, count=int(np.prod(shape, dtype=np.int64)),
                            offset=offset).reshape(shape)
        tensors[name] = arr.copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return Checkpoint(tensors, header.get("fingerprint", ""), header.get("normalizer"),
                      header.get("meta", {}), dtype)
