"""Task-blind batching server.

The server holds the frozen model and nothing else.  Every request carries
its own prompt, so one code path serves all of them; there is no task
identifier anywhere on the wire.
"""
from __future__ import annotations

import asyncio
import logging
import struct
import threading
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ..fm import ToyTransformer, init_param_shapes
from . import wire

log = logging.getLogger(__name__)


@dataclass
class RequestResult:
    index: int
    request_id: int
    logits: np.ndarray | None = None
    error: tuple | None = None  # (code, message)

    @property
    def ok(self):
        return self.error is None


@dataclass
class BatchResult:
    results: list
    batch_size: int
    groups: int = 0

    def by_request_id(self) -> dict:
        return {(r.index, r.request_id): r for r in self.results}


def check_task_blind(fm: ToyTransformer) -> None:
    """The server's parameters must be exactly the frozen model's."""
    if set(fm.params) != set(init_param_shapes(fm.cfg)):
        raise AssertionError("server parameter set differs from the frozen model")


def _validate(fm: ToyTransformer, env: wire.PrefixEnvelope):
    # a zero-shot request carries no vectors, so d may also be 0
    if env.d != fm.d and not (env.m == 0 and env.d == 0):
        return (wire.DIM_MISMATCH, f"prefix dimension {env.d} != model dimension {fm.d}")
    n = env.tokens.size
    if n == 0:
        return (wire.BAD_REQUEST, "empty token sequence")
    if n + env.m > fm.cfg.n_max:
        return (wire.BAD_REQUEST, f"prompt {env.m} + tokens {n} exceeds n_max={fm.cfg.n_max}")
    if env.tokens.max() >= fm.cfg.vocab:
        return (wire.BAD_REQUEST, f"token id out of range for vocab {fm.cfg.vocab}")
    return None


def server_step(fm: ToyTransformer, batch: list) -> BatchResult:
    """Forward every envelope in ``batch`` with its own prefix.

    Requests of equal (prompt length, sequence length) are stacked into one
    batched forward; invalid requests get an error result and do not
    affect the rest.
    """
    if not batch:
        raise ValueError("empty batch")
    results = [None] * len(batch)
    groups = defaultdict(list)
    for i, env in enumerate(batch):
        err = _validate(fm, env)
        if err is not None:
            results[i] = RequestResult(i, env.request_id, error=err)
        else:
            groups[(env.m, env.tokens.size)].append(i)
    for (m, _), idx in groups.items():
        tokens = np.stack([batch[i].tokens.astype(np.int64) for i in idx])
        prefix = np.stack([batch[i].prefix for i in idx]).astype(fm.dtype) if m else None
        logits = fm.forward(tokens, prefix)
        for row, i in enumerate(idx):
            results[i] = RequestResult(i, batch[i].request_id, logits[row].astype(np.float32))
    return BatchResult(results, len(batch), len(groups))


@dataclass
class ServerStats:
    batches: int = 0
    requests: int = 0
    batch_sizes: list = field(default_factory=list)


class BatchingServer:
    """Length-prefixed TCP front end feeding a single inference worker.

    Connection handlers push decoded envelopes onto one queue; the worker
    drains up to ``max_batch`` requests, or whatever arrived within
    ``timeout`` seconds of the first, and runs :func:`server_step`.
    """

    def __init__(self, fm: ToyTransformer, host="127.0.0.1", port=0, max_batch=16, timeout=0.01):
        check_task_blind(fm)
        self.fm = fm
        self.host, self.port = host, port
        self.max_batch, self.timeout = max_batch, timeout
        self.stats = ServerStats()
        self._queue = None
        self._server = None
        self._worker = None

    async def start(self):
        self._queue = asyncio.Queue()
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        self._worker = asyncio.create_task(self._work())
        log.info("serving on %s:%d (batch %d, window %.3fs)", self.host, self.port,
                 self.max_batch, self.timeout)

    async def stop(self):
        self._server.close()
        await self._server.wait_closed()
        self._worker.cancel()
        try:
            await self._worker
        except asyncio.CancelledError:
            pass

    async def _handle(self, reader, writer):
        try:
            while True:
                try:
                    head = await reader.readexactly(4)
                except asyncio.IncompleteReadError:
                    break
                (n,) = struct.unpack("<I", head)
                if n > wire.MAX_FRAME:
                    log.warning("frame of %d bytes exceeds limit; closing connection", n)
                    break
                body = await reader.readexactly(n)
                try:
                    env = wire.deserialize(body)
                except wire.WireError as exc:
                    log.warning("malformed frame (code %d): %s; closing connection", exc.code, exc)
                    break
                fut = asyncio.get_running_loop().create_future()
                await self._queue.put((env, fut))
                res = await fut
                if res.ok:
                    out = wire.encode_response(res.request_id, res.logits)
                else:
                    out = wire.encode_error(res.request_id, *res.error)
                writer.write(wire.frame(out))
                await writer.drain()
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            writer.close()

    async def _work(self):
        loop = asyncio.get_running_loop()
        while True:
            batch = [await self._queue.get()]
            deadline = loop.time() + self.timeout
            while len(batch) < self.max_batch:
                remaining = deadline - loop.time()
                if remaining <= 0:
                    break
                try:
                    batch.append(await asyncio.wait_for(self._queue.get(), remaining))
                except asyncio.TimeoutError:
                    break
            envs = [env for env, _ in batch]
            try:
                result = await loop.run_in_executor(None, server_step, self.fm, envs)
                outcomes = result.results
            except Exception as exc:  # keep serving; fail just this batch
                log.exception("batch failed")
                outcomes = [RequestResult(i, e.request_id, error=(wire.BAD_REQUEST, str(exc)))
                            for i, e in enumerate(envs)]
            self.stats.batches += 1
            self.stats.requests += len(batch)
            self.stats.batch_sizes.append(len(batch))
            for (_, fut), res in zip(batch, outcomes):
                if not fut.done():
                    fut.set_result(res)


class ServerThread:
    """Run a :class:`BatchingServer` on a private event loop in a thread."""

    def __init__(self, fm, host="127.0.0.1", port=0, max_batch=16, timeout=0.01):
        self.server = BatchingServer(fm, host, port, max_batch, timeout)
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, daemon=True)

    @property
    def address(self):
        return self.server.host, self.server.port

    def start(self):
        self._thread.start()
        asyncio.run_coroutine_threadsafe(self.server.start(), self._loop).result()
        return self

    def stop(self):
        asyncio.run_coroutine_threadsafe(self.server.stop(), self._loop).result()
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join()
        self._loop.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(fm: ToyTransformer, host="127.0.0.1", port=8765, max_batch=16, timeout=0.01):
    """Block forever serving ``fm``."""

    async def main():
        srv = BatchingServer(fm, host, port, max_batch, timeout)
        await srv.start()
        await asyncio.Event().wait()

    asyncio.run(main())
