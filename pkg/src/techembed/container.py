"""Binary container shared by encoder checkpoints ("TEMB") and indexes ("TIDX").

Layout::

    magic      4 bytes
    version    u32 little-endian
    hdr_len    u64 little-endian
    header     hdr_len bytes of UTF-8 JSON
    payload    raw little-endian tensors, back to back

The header lists every tensor as ``{"name", "dtype", "shape", "offset",
"nbytes"}`` with offsets relative to the payload start, plus free-form
``meta``. Serialisation is canonical (sorted keys, fixed separators), so equal
contents give equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}
_PREFIX = struct.Struct("<4sIQ")


class ContainerError(ValueError):
    pass


def dumps(magic: bytes, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = "f8" if arr.dtype == np.float64 else "f4"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"dtype": code, "name": name, "nbytes": len(raw), "offset": offset, "shape": list(arr.shape)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")
    return _PREFIX.pack(magic, FORMAT_VERSION, len(header)) + header + b"".join(blobs)


def loads(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size:
        raise ContainerError("file truncated before header")
    got_magic, version, hdr_len = _PREFIX.unpack_from(data)
    if got_magic != magic:
        raise ContainerError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported format version {version} (reader supports {FORMAT_VERSION})")
    start = _PREFIX.size + hdr_len
    if len(data) < start:
        raise ContainerError("file truncated inside header")
    try:
        header = json.loads(data[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header: {exc}") from None
    tensors = {}
    for e in header["tensors"]:
        lo = start + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(data):
            raise ContainerError(f"file truncated inside tensor {e['name']!r}")
        dtype = _DTYPES[e["dtype"]]
        arr = np.frombuffer(data[lo:hi], dtype=dtype).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    expected = start + sum(e["nbytes"] for e in header["tensors"])
    if len(data) != expected:
        raise ContainerError(f"payload size mismatch: {len(data)} bytes, expected {expected}")
    return header["meta"], tensors


def write(path, magic: bytes, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    data = dumps(magic, meta, tensors)
    Path(path).write_bytes(data)
    return data


def read(path, magic: bytes):
    return loads(Path(path).read_bytes(), magic)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
