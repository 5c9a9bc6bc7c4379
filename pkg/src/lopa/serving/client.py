"""Client side: compute a prompt locally and ship it with the tokens."""
from __future__ import annotations

import socket
import struct

import numpy as np

from . import wire


class RemoteError(ConnectionError):
    """Transport failure or an error response from the server."""

    def __init__(self, msg, code=None):
        super().__init__(msg)
        self.code = code


def client_prepare(encoder, composer, tokens, request_id: int = 0) -> wire.PrefixEnvelope:
    """Envelope carrying this instance's prompt.

    The prompt is computed in the composer's precision and narrowed to f32
    exactly once, here.  ``composer=None`` produces a zero-shot request.
    """
    tokens = np.asarray(tokens).reshape(-1)
    if composer is None:
        prefix = np.zeros((0, 0), dtype=np.float32)
    elif composer.needs_input:
        x_enc, _ = encoder.forward(tokens[None])
        z, _ = composer.forward(x_enc)
        prefix = z[0]
    else:
        prefix = composer.forward(batch=1)[0][0]
    return wire.PrefixEnvelope(prefix.astype(np.float32), tokens, request_id)


def zero_shot_envelope(d: int, tokens, request_id: int = 0) -> wire.PrefixEnvelope:
    return wire.PrefixEnvelope(np.zeros((d, 0), np.float32), tokens, request_id)


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise RemoteError(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


class Connection:
    """Blocking connection that can carry many requests in sequence."""

    def __init__(self, host, port, timeout=10.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise RemoteError(f"cannot connect to {host}:{port}: {exc}") from exc

    def query(self, env: wire.PrefixEnvelope) -> np.ndarray:
        try:
            self.sock.sendall(wire.frame(wire.serialize(env)))
            (n,) = struct.unpack("<I", _recv_exact(self.sock, 4))
            body = _recv_exact(self.sock, n)
        except OSError as exc:
            raise RemoteError(f"transport failure: {exc}") from exc
        rid, out = wire.decode_response(body)
        if rid != env.request_id:
            raise RemoteError(f"response for request {rid}, expected {env.request_id}")
        if isinstance(out, tuple):
            code, msg = out
            raise RemoteError(f"server error {code}: {msg}", code)
        return out

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def query(host, port, env: wire.PrefixEnvelope, timeout=10.0) -> np.ndarray:
    """One request over a fresh connection; returns f32 logits."""
    with Connection(host, port, timeout) as conn:
        return conn.query(env)
