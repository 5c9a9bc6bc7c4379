"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic  b"LPCK"
    4       2     format version (1)
    6       4     header length H in bytes
    10      H     UTF-8 JSON header
    10+H    ...   array payload, float32 little-endian, row-major

The JSON header holds ``{"kind": str, "meta": {...}, "arrays": [{"name",
"shape", "offset"}]}`` where ``offset`` counts bytes from the start of the
payload.  Writes go to a temporary file that is renamed into place.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"LPCK"
VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(kind: str, meta: dict, arrays: dict) -> bytes:
    index, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype=_F32)
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"kind": kind, "meta": meta, "arrays": index}, sort_keys=True).encode()
    return MAGIC + struct.pack("<HI", VERSION, len(header)) + header + b"".join(chunks)


def loads(data: bytes, kind: str | None = None):
    """Return ``(kind, meta, arrays)``; arrays come back as float32."""
    if len(data) < 10 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(data) < 10 + hlen:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(data[10:10 + hlen].decode())
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"expected a {kind!r} checkpoint, got {header['kind']!r}")
    payload = memoryview(data)[10 + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + 4 * count > len(payload):
            raise CheckpointError(f"truncated payload for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(payload, _F32, count, start).reshape(shape).copy()
    return header["kind"], header["meta"], arrays


def save(path, kind: str, meta: dict, arrays: dict) -> None:
    atomic_write(path, dumps(kind, meta, arrays))


def load(path, kind: str | None = None):
    with open(path, "rb") as fh:
        return loads(fh.read(), kind)


def save_fm(path, fm) -> None:
    save(path, "fm", {"config": fm.cfg.to_dict()}, fm.params)


def load_fm(path, dtype=np.float32):
    from .fm import FMConfig, ToyTransformer

    _, meta, arrays = load(path, "fm")
    return ToyTransformer(FMConfig(**meta["config"]), arrays, dtype)
