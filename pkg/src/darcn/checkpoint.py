"""Binary checkpoint container.

Layout (all little-endian)::

    b"DARC" | u32 version | u32 entry count | entries...
    entry = u32 name length | name (UTF-8) | u8 dtype tag | u32 rank | u64 dims[rank] | raw data

Tag 0 is float32, 1 is uint8 (used for the JSON metadata blob stored
under ``__meta__``), 2 is float64. Entries are written in sorted name order
and nothing time-dependent is stored, so saving the same state twice gives
identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"DARC"
VERSION = 1
META = "__meta__"
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}
_CODES = {np.dtype(v).str: k for k, v in _TAGS.items()}


def _tag(arr: np.ndarray) -> int:
    try:
        return _CODES[arr.dtype.newbyteorder("<").str if arr.dtype.byteorder == ">" else arr.dtype.str]
    except KeyError:
        raise DataError(f"cannot store dtype {arr.dtype} in a checkpoint") from None


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = {k: np.asarray(v) for k, v in tensors.items()}
    if META in entries:
        raise DataError(f"{META!r} is reserved")
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        entries[META] = np.frombuffer(blob, dtype=np.uint8)
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(entries)))
    for name in sorted(entries):
        arr = entries[name]
        tag = _tag(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<BI", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise DataError("checkpoint is truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in _TAGS:
            raise DataError(f"entry {name!r}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = _TAGS[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(bytes(take(size)), dtype=dt).reshape(shape).copy()
    if pos != len(view):
        raise DataError("trailing bytes after the last checkpoint entry")
    meta_arr = tensors.pop(META, None)
    meta = None if meta_arr is None else json.loads(meta_arr.tobytes().decode("utf-8"))
    return tensors, meta


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write atomically (temp file then rename) so a crash keeps the old file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    os.replace(tmp, path)
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)
