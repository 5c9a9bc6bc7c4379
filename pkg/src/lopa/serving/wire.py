"""Wire format for prefix-carrying requests and logit responses.

Envelope (little-endian)::

    magic       4 bytes   b"LOPA"
    version     u16       1
    d           u16       prompt vector dimension
    m           u16       prompt length (0 for a zero-shot request)
    prefix      d*m f32   row-major d x m
    token_count u32
    tokens      token_count u32
    request_id  u64

Total size is ``26 + 4*d*m + 4*token_count`` bytes.

Over a stream every message is framed as a u32 byte length followed by the
body.  A response body is ``request_id u64, count u32, count f32 logits``;
a per-request failure sets ``count`` to ``0xFFFFFFFF`` and follows it with
``code u32, msg_len u32, msg`` (UTF-8).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"LOPA"
VERSION = 1
HEADER = struct.Struct("<4sHHH")
ERROR_COUNT = 0xFFFFFFFF
MAX_FRAME = 64 * 1024 * 1024

# error codes
BAD_MAGIC = 1
BAD_VERSION = 2
TRUNCATED = 3
LENGTH_MISMATCH = 4
FRAME_TOO_LARGE = 5
# per-request failures reported by the server
DIM_MISMATCH = 10
BAD_REQUEST = 11


class WireError(ValueError):
    code = 0

    def __init__(self, msg):
        super().__init__(msg)


class BadMagic(WireError):
    code = BAD_MAGIC


class VersionMismatch(WireError):
    code = BAD_VERSION


class Truncated(WireError):
    code = TRUNCATED


class LengthMismatch(WireError):
    code = LENGTH_MISMATCH


@dataclass(eq=False)
class PrefixEnvelope:
    prefix: np.ndarray  # (d, m) float32
    tokens: np.ndarray  # (n,) uint32
    request_id: int = 0
    version: int = VERSION

    def __post_init__(self):
        self.prefix = np.ascontiguousarray(self.prefix, dtype="<f4")
        self.tokens = np.ascontiguousarray(self.tokens, dtype="<u4").reshape(-1)
        if self.prefix.ndim != 2:
            raise ValueError(f"prefix must be d x m, got shape {self.prefix.shape}")
        if max(self.prefix.shape) > 0xFFFF:
            raise ValueError(f"prefix dims {self.prefix.shape} exceed u16")

    @property
    def d(self):
        return self.prefix.shape[0]

    @property
    def m(self):
        return self.prefix.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PrefixEnvelope):
            return NotImplemented
        return serialize(self) == serialize(other)

    def __hash__(self):
        return hash(serialize(self))


def frame_size(d: int, m: int, token_count: int) -> int:
    return HEADER.size + 4 * d * m + 4 + 4 * token_count + 8


def serialize(env: PrefixEnvelope) -> bytes:
    return b"".join([
        HEADER.pack(MAGIC, env.version, env.d, env.m),
        env.prefix.tobytes(),
        struct.pack("<I", env.tokens.size),
        env.tokens.tobytes(),
        struct.pack("<Q", env.request_id),
    ])


def deserialize(data: bytes) -> PrefixEnvelope:
    """Parse one envelope; the whole buffer must be consumed exactly."""
    data = bytes(data)
    if len(data) < 4:
        raise Truncated(f"{len(data)} bytes is shorter than the magic")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    if len(data) < HEADER.size:
        raise Truncated(f"{len(data)} bytes is shorter than the header")
    _, version, d, m = HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatch(f"unsupported version {version}, expected {VERSION}")
    pos = HEADER.size + 4 * d * m
    if len(data) < pos + 4:
        raise Truncated(f"need {pos + 4} bytes for a {d}x{m} prefix, have {len(data)}")
    (count,) = struct.unpack_from("<I", data, pos)
    need = frame_size(d, m, count)
    if len(data) < need:
        raise Truncated(f"need {need} bytes, have {len(data)}")
    if len(data) != need:
        raise LengthMismatch(f"frame is {len(data)} bytes but d={d}, m={m}, "
                             f"tokens={count} imply {need}")
    prefix = np.frombuffer(data, "<f4", d * m, HEADER.size).reshape(d, m)
    tokens = np.frombuffer(data, "<u4", count, pos + 4)
    (rid,) = struct.unpack_from("<Q", data, need - 8)
    return PrefixEnvelope(prefix.copy(), tokens.copy(), rid, version)


def encode_response(request_id: int, logits) -> bytes:
    logits = np.ascontiguousarray(logits, dtype="<f4").reshape(-1)
    return struct.pack("<QI", request_id, logits.size) + logits.tobytes()


def encode_error(request_id: int, code: int, msg: str) -> bytes:
    raw = msg.encode()
    return struct.pack("<QIII", request_id, ERROR_COUNT, code, len(raw)) + raw


def decode_response(data: bytes):
    """Return ``(request_id, logits)`` or ``(request_id, (code, msg))``."""
    if len(data) < 12:
        raise Truncated("response shorter than its header")
    rid, count = struct.unpack_from("<QI", data)
    if count == ERROR_COUNT:
        code, n = struct.unpack_from("<II", data, 12)
        return rid, (code, data[20:20 + n].decode())
    if len(data) != 12 + 4 * count:
        raise LengthMismatch(f"response of {len(data)} bytes does not hold {count} logits")
    return rid, np.frombuffer(data, "<f4", count, 12).copy()


def frame(body: bytes) -> bytes:
    return struct.pack("<I", len(body)) + body
