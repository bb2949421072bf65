"""Reader/writer for the NVT1 named-tensor container.

Layout (all integers little-endian)::

    magic   b"NVT1"
    version u32
    count   u32
    entry*  name_len u16, name utf-8, dtype u8, rank u8, extents u64[rank], raw data

dtype codes: 1 float32, 2 float64, 3 uint8, 4 int64. The JSON metadata of a
checkpoint is stored as a rank-1 uint8 entry named ``__meta__``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from nvt.errors import FormatError

MAGIC = b"NVT1"
VERSION = 1
META_KEY = "__meta__"

_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i8")}
_BY_DTYPE = {np.dtype(v).newbyteorder("="): k for k, v in _CODES.items()}


def _code_for(arr: np.ndarray) -> int:
    key = arr.dtype.newbyteorder("=")
    if key not in _BY_DTYPE:
        raise TypeError(f"unsupported dtype {arr.dtype} for NVT1 container")
    return _BY_DTYPE[key]


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    items = [(name, np.asarray(arr)) for name, arr in tensors.items()]
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        items.append((META_KEY, np.frombuffer(blob, dtype=np.uint8)))
    parts = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        code = _code_for(arr)
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any] | None]:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(view) - pos} left", pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    magic = bytes(take(4, "magic"))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version} (supported: {VERSION})", 4)
    tensors: dict[str, np.ndarray] = {}
    meta = None
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", start + 2) from None
        code_pos = pos
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in _CODES:
            raise FormatError(f"unknown dtype code {code}", code_pos)
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents"))
        dtype = _CODES[code]
        nbytes = int(np.prod(shape, dtype=np.uint64)) * dtype.itemsize if rank else dtype.itemsize
        data = np.frombuffer(take(nbytes, f"data of {name!r}"), dtype=dtype).reshape(shape)
        if name == META_KEY:
            try:
                meta = json.loads(data.tobytes().decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"metadata is not valid JSON: {exc}", start) from None
        else:
            tensors[name] = data.astype(dtype.newbyteorder("="), copy=True)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last entry", pos)
    return tensors, meta


def save_packed(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    """Write atomically: a reader never sees a half-written file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors, meta))
    os.replace(tmp, path)


def load_packed(path) -> tuple[dict[str, np.ndarray], dict[str, Any] | None]:
    return decode(Path(path).read_bytes())
