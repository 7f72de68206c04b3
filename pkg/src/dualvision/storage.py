"""Versioned tensor container used for checkpoints, clips and feature caches.

Layout (all integers little-endian)::

    b"DVTC" | u32 version | u64 header length | JSON header | raw payloads

The header is canonical JSON (sorted keys, compact separators) holding free
metadata plus, per tensor, its name, dtype, shape, byte offset and byte
length relative to the start of the payload section.  Tensors are stored in
insertion order, so reading and re-writing a container reproduces its bytes.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .errors import DataError

MAGIC = b"DVTC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"<f4", "<f8", "<i8", "<i4", "|u1", "|b1"}

PathLike = Union[str, os.PathLike]


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        dtype = little.dtype.str
        if dtype not in _DTYPES:
            raise DataError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(little).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = _canonical({"meta": dict(meta or {}), "tensors": entries, "version": VERSION})
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def decode(blob: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < _PREFIX.size:
        raise DataError(f"{source}: truncated container")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{source}: unsupported container version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: corrupt header ({exc})") from None
    payload = memoryview(blob)[start + hlen :]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise DataError(f"{source}: payload for {entry['name']!r} is truncated")
        arr = np.frombuffer(payload[entry["offset"] : end], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header["meta"]


def save(path: PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors, meta))
    os.replace(tmp, path)


def load(path: PathLike) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    return decode(blob, str(path))
