"""Client SDK: writers, prefetching samplers and multi-server pools."""

from __future__ import annotations

import itertools
import logging
import os
import queue
import random
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from replaystore import wire
from replaystore.chunks import DEFAULT_CODEC, Chunk, Codec, build_chunk_from_flat
from replaystore.errors import (
    CancelledError, DeadlineExceededError, InvalidArgumentError, ReplayError, TransportError,
    from_code)
from replaystore.server import parse_address
from replaystore.tensors import Signature, compare_signatures, flatten, unflatten

log = logging.getLogger(__name__)

ENDPOINTS_ENV = "REPLAYSTORE_ENDPOINTS"

Address = tuple[str, int]


def _address(addr: str | Address) -> Address:
    return parse_address(addr) if isinstance(addr, str) else (addr[0], int(addr[1]))


@dataclass
class RetryPolicy:
    """Exponential backoff with full jitter."""

    max_attempts: int = 5
    initial_backoff: float = 0.05
    max_backoff: float = 2.0
    multiplier: float = 2.0

    def delays(self) -> Iterator[float]:
        delay = self.initial_backoff
        for _ in range(self.max_attempts - 1):
            yield random.uniform(0, delay)
            delay = min(delay * self.multiplier, self.max_backoff)


def _raise_if_error(msg: wire.Message) -> None:
    if isinstance(msg, wire.Error):
        raise from_code(msg.code, msg.detail)


# samples


@dataclass
class ReplaySample:
    key: int
    priority: float
    probability: float
    times_sampled: int
    table_size: int
    data: Any
    length: int
    rows_transmitted: int
    endpoint: Address | None = None

    @property
    def steps(self) -> list:
        """The trajectory as a list of per-step nests."""
        cols, sig = flatten(self.data)
        return [unflatten([c[i] for c in cols], _unbatched(sig)) for i in range(self.length)]


def _unbatched(sig: Signature) -> Signature:
    from replaystore.tensors import ColumnSpec
    return Signature(tuple(ColumnSpec(c.path, c.dtype, c.shape[1:]) for c in sig.columns))


def decode_sample(resp: wire.SampleResponse, endpoint: Address | None = None) -> ReplaySample:
    """Decompress a sample's chunks and cut out the item's rows."""
    chunks = resp.chunks
    sig = chunks[0].signature
    per_chunk = [c.column_arrays() for c in chunks]
    start, stop = resp.offset, resp.offset + resp.length
    columns = []
    for i in range(len(sig)):
        if len(per_chunk) == 1:
            col = per_chunk[0][i][start:stop]
        else:
            col = np.concatenate([cols[i] for cols in per_chunk])[start:stop]
        columns.append(np.array(col))
    return ReplaySample(resp.key, resp.priority, resp.probability, resp.times_sampled,
                        resp.table_size, unflatten(columns, sig), resp.length,
                        resp.rows_transmitted, endpoint)


# writer


@dataclass
class WriterConfig:
    max_sequence_length: int
    chunk_length: int | None = None
    max_in_flight_items: int = 64
    codec: Codec = DEFAULT_CODEC

    def __post_init__(self):
        if self.chunk_length is None:
            self.chunk_length = self.max_sequence_length
        if self.max_sequence_length < 1 or self.chunk_length < 1:
            raise InvalidArgumentError("chunk_length and max_sequence_length must be positive")
        if self.chunk_length > self.max_sequence_length:
            raise InvalidArgumentError("chunk_length must be <= max_sequence_length")
        if self.max_in_flight_items < 1:
            raise InvalidArgumentError("max_in_flight_items must be positive")


class _Stream:
    def __init__(self, address: Address):
        self.address = address
        self.conn = wire.Connection.connect(address)
        self.sent_chunks: set[int] = set()
        self.items_sent = 0
        self.confirmed = 0
        self.last_keys: deque[int] = deque(maxlen=1024)

    @property
    def unacked(self) -> int:
        return self.items_sent - self.confirmed


@dataclass
class _PendingItem:
    table: str
    chunk_keys: list[int]
    offset: int
    length: int
    priority: float


class Writer:
    """Streams steps to one or more servers and creates items over them.

    ``append`` buffers steps; every ``chunk_length`` steps become one chunk.
    ``create_item`` references the most recent steps. An item waits locally
    until every chunk it references is complete, then goes out after any of
    those chunks its target server has not seen yet, so no chunk is sent to a
    server twice. ``flush`` closes a partial chunk and waits for the server to
    confirm every item. With several endpoints, items rotate round-robin.
    """

    def __init__(self, addresses: Sequence[str | Address], config: WriterConfig):
        if not addresses:
            raise InvalidArgumentError("writer needs at least one endpoint")
        self.config = config
        self._streams = [_Stream(_address(a)) for a in addresses]
        self._signature: Signature | None = None
        self._keys = itertools.count(1)
        self._open_key: int | None = None
        self._open_rows: list[list[np.ndarray]] = []
        self._history: deque[tuple[int, int]] = deque(maxlen=config.max_sequence_length)
        self._built: dict[int, Chunk] = {}
        self._pending: deque[_PendingItem] = deque()
        self._rr = 0
        self._error: ReplayError | None = None
        self._closed = False
        self.chunks_sent = 0
        self.items_created = 0

    @property
    def signature(self) -> Signature | None:
        return self._signature

    @property
    def episode_steps(self) -> int:
        return len(self._history)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._close_streams()

    def _check(self):
        if self._error is not None:
            raise self._error
        if self._closed:
            raise InvalidArgumentError("writer is closed")

    def append(self, step) -> None:
        self._check()
        values, sig = flatten(step)
        if self._signature is None:
            self._signature = sig
        else:
            compare_signatures(sig, self._signature)
        if self._open_key is None:
            self._open_key = next(self._keys)
            self._open_rows = []
        self._open_rows.append(values)
        self._history.append((self._open_key, len(self._open_rows) - 1))
        if len(self._open_rows) == self.config.chunk_length:
            self._finish_chunk()

    def create_item(self, table: str, num_timesteps: int, priority: float) -> None:
        """Queue an item over the last ``num_timesteps`` appended steps."""
        self._check()
        if num_timesteps < 1:
            raise InvalidArgumentError("num_timesteps must be positive")
        if num_timesteps > self.config.max_sequence_length:
            raise InvalidArgumentError(
                f"num_timesteps {num_timesteps} exceeds max_sequence_length "
                f"{self.config.max_sequence_length}")
        if num_timesteps > len(self._history):
            raise InvalidArgumentError(
                f"num_timesteps {num_timesteps} exceeds the {len(self._history)} steps available")
        if not priority >= 0:
            raise InvalidArgumentError(f"invalid priority {priority}")
        refs = list(itertools.islice(self._history, len(self._history) - num_timesteps, None))
        keys = list(dict.fromkeys(k for k, _ in refs))
        self._pending.append(_PendingItem(table, keys, refs[0][1], num_timesteps, float(priority)))
        self.items_created += 1
        self._send_ready()

    def flush(self) -> None:
        """Send everything buffered, including a partial chunk, and wait for confirmation."""
        self._check()
        if self._open_rows:
            self._finish_chunk()
        self._send_ready()
        for stream in self._streams:
            while stream.unacked:
                self._read_ack(stream)

    def close(self) -> None:
        if self._closed:
            return
        try:
            if self._error is None:
                self.flush()
        finally:
            self._closed = True
            self._close_streams()

    def _close_streams(self):
        self._closed = True
        for stream in self._streams:
            stream.conn.close()

    def _finish_chunk(self) -> None:
        chunk = build_chunk_from_flat(self._open_key, self._open_rows, self._signature,
                                      self.config.codec)
        self._built[chunk.key] = chunk
        self._open_key = None
        self._open_rows = []
        if len(self._streams) == 1:
            self._send_chunk(self._streams[0], chunk)
        self._send_ready()
        self._retire_chunks()

    def _send_chunk(self, stream: _Stream, chunk: Chunk) -> None:
        try:
            stream.conn.send(wire.InsertChunk(chunk))
        except TransportError as e:
            self._error = e
            raise
        stream.sent_chunks.add(chunk.key)
        self.chunks_sent += 1

    def _send_ready(self) -> None:
        while self._pending:
            item = self._pending[0]
            if any(k not in self._built for k in item.chunk_keys):
                return
            self._pending.popleft()
            stream = self._streams[self._rr % len(self._streams)]
            self._rr += 1
            for k in item.chunk_keys:
                if k not in stream.sent_chunks:
                    self._send_chunk(stream, self._built[k])
            try:
                stream.conn.send(wire.CreateItem(item.table, item.chunk_keys, item.offset,
                                                 item.length, item.priority))
            except TransportError as e:
                self._error = e
                raise
            stream.items_sent += 1
            while stream.conn.poll(0) or stream.unacked > self.config.max_in_flight_items:
                self._read_ack(stream)

    def _read_ack(self, stream: _Stream) -> None:
        try:
            msg = stream.conn.recv()
            _raise_if_error(msg)
        except ReplayError as e:
            self._error = e
            raise
        if not isinstance(msg, wire.InsertAck):
            self._error = InvalidArgumentError(f"unexpected {type(msg).__name__} on writer stream")
            raise self._error
        stream.confirmed = msg.confirmed
        stream.last_keys.append(msg.key)

    def _retire_chunks(self) -> None:
        if not self._history:
            return
        oldest = self._history[0][0]
        pinned = {k for item in self._pending for k in item.chunk_keys}
        stale = [k for k in self._built if k < oldest and k not in pinned]
        if not stale:
            return
        for stream in self._streams:
            drop = [k for k in stale if k in stream.sent_chunks]
            if drop:
                stream.conn.send(wire.ReleaseChunks(drop))
                stream.sent_chunks.difference_update(drop)
        for k in stale:
            del self._built[k]

    def inserted_keys(self) -> list[int]:
        """Server-assigned keys of recently confirmed items (most recent last)."""
        return [k for s in self._streams for k in s.last_keys]


# sampler


_END = object()


class _Worker(threading.Thread):
    def __init__(self, sampler: "Sampler", address: Address, num_samples: int):
        super().__init__(daemon=True, name=f"sampler-{address[0]}:{address[1]}")
        self.sampler = sampler
        self.address = address
        self.remaining = num_samples
        self.conn: wire.Connection | None = None
        self.stopped = False

    def run(self):
        s = self.sampler
        delays = None
        while not self.stopped:
            try:
                self.conn = wire.Connection.connect(self.address)
                self.conn.send(wire.SampleRequest(s.table, s.max_in_flight_samples_per_worker,
                                                  self.remaining, s.timeout_ms))
                while True:
                    msg = self.conn.recv()
                    delays = None
                    if isinstance(msg, wire.SampleResponse):
                        if self.remaining > 0:
                            self.remaining -= 1
                        s._queue.put((self, self.conn, decode_sample(msg, self.address)))
                    elif isinstance(msg, wire.EndOfSequence):
                        s._queue.put((self, None, _END))
                        return
                    else:
                        _raise_if_error(msg)
                        raise InvalidArgumentError(f"unexpected {type(msg).__name__} on sample stream")
            except (TransportError, CancelledError) as e:
                # a server shutting down cancels its streams; treat it like a lost link
                if self.stopped:
                    return
                if delays is None:
                    delays = s.retry.delays()
                delay = next(delays, None)
                if delay is None:
                    log.warning("giving up on %s: %s", self.address, e)
                    s._queue.put((self, None, TransportError(f"{self.address}: {e}")))
                    return
                time.sleep(delay)
            except ReplayError as e:
                s._queue.put((self, None, e))
                return
            finally:
                if self.conn is not None:
                    self.conn.close()

    def stop(self):
        self.stopped = True
        if self.conn is not None:
            self.conn.close()


class Sampler:
    """Merged, flow-controlled stream of samples from one table on each endpoint.

    Each worker holds one long-lived stream and lets the server run at most
    ``max_in_flight_samples_per_worker`` samples ahead of what ``next`` has
    handed out. ``next`` returns ``None`` once every stream has ended, which
    happens when ``num_samples`` are delivered or when the server could not
    produce a sample within ``timeout_ms``. Streams whose server dies are
    retried and eventually dropped; only when all are lost does ``next``
    raise ``TransportError``.
    """

    def __init__(self, addresses: Sequence[str | Address], table: str, *,
                 max_in_flight_samples_per_worker: int = 1, num_workers: int = 1,
                 timeout_ms: int = -1, num_samples: int = -1,
                 retry: RetryPolicy | None = None):
        if not addresses:
            raise InvalidArgumentError("sampler needs at least one endpoint")
        if max_in_flight_samples_per_worker < 1 or num_workers < 1:
            raise InvalidArgumentError("max_in_flight_samples_per_worker and num_workers must be >= 1")
        if timeout_ms < -1:
            raise InvalidArgumentError("timeout_ms must be >= -1")
        self.table = table
        self.max_in_flight_samples_per_worker = max_in_flight_samples_per_worker
        self.timeout_ms = timeout_ms
        self.retry = retry or RetryPolicy()
        self._queue: queue.Queue = queue.Queue()
        self._ack_every = max(1, max_in_flight_samples_per_worker // 2)
        self._owed: dict[wire.Connection, int] = {}
        endpoints = [_address(a) for a in addresses]
        self._workers = [_Worker(self, a, num_samples) for a in endpoints for _ in range(num_workers)]
        self._live = len(self._workers)
        self._ended = 0
        self._errors: list[ReplayError] = []
        for w in self._workers:
            w.start()

    def __iter__(self):
        while True:
            sample = self.next()
            if sample is None:
                return
            yield sample

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def next(self, timeout: float | None = None) -> ReplaySample | None:
        """Next sample, or ``None`` at end of data.

        ``timeout`` bounds the local wait in seconds and raises
        ``DeadlineExceededError`` when it expires.
        """
        while True:
            if self._live == 0:
                if self._ended:
                    return None
                raise self._errors[-1] if self._errors else TransportError("no live streams")
            try:
                worker, conn, payload = self._queue.get(timeout=timeout)
            except queue.Empty:
                raise DeadlineExceededError(f"no sample within {timeout}s") from None
            if isinstance(payload, ReplaySample):
                # credits go back in batches of half a window to save round trips
                owed = self._owed.get(conn, 0) + 1
                if owed >= self._ack_every:
                    owed = 0
                    try:
                        conn.send(wire.SampleAck(self._ack_every))
                    except TransportError:
                        pass
                self._owed[conn] = owed
                return payload
            self._live -= 1
            if payload is _END:
                self._ended += 1
            elif isinstance(payload, TransportError):
                self._errors.append(payload)
            else:
                self.close()
                raise payload

    def close(self) -> None:
        for w in self._workers:
            w.stop()


# clients


class Client:
    """Handle on one server. Unary calls share one lazily opened connection."""

    def __init__(self, address: str | Address, retry: RetryPolicy | None = None):
        self.address = _address(address)
        self.retry = retry or RetryPolicy()
        self._conn: wire.Connection | None = None
        self._lock = threading.Lock()

    def __repr__(self):
        return f"Client({self.address[0]}:{self.address[1]})"

    def _call(self, request: wire.Message) -> wire.Message:
        delays = self.retry.delays()
        with self._lock:
            while True:
                try:
                    if self._conn is None:
                        self._conn = wire.Connection.connect(self.address)
                    self._conn.send(request)
                    reply = self._conn.recv()
                    _raise_if_error(reply)
                    return reply
                except TransportError:
                    if self._conn is not None:
                        self._conn.close()
                        self._conn = None
                    delay = next(delays, None)
                    if delay is None:
                        raise
                    time.sleep(delay)

    def writer(self, max_sequence_length: int, chunk_length: int | None = None,
               **kw) -> Writer:
        return Writer([self.address], WriterConfig(max_sequence_length, chunk_length, **kw))

    def sampler(self, table: str, **kw) -> Sampler:
        return Sampler([self.address], table, retry=kw.pop("retry", self.retry), **kw)

    def sample(self, table: str, num_samples: int = 1, timeout_ms: int = -1) -> list[ReplaySample]:
        """Fetch up to ``num_samples`` samples over a single stream."""
        with self.sampler(table, num_samples=num_samples, timeout_ms=timeout_ms,
                          max_in_flight_samples_per_worker=max(1, num_samples)) as s:
            return list(s)

    def update_priorities(self, table: str, updates: Iterable[tuple[int, float]] | dict) -> int:
        if isinstance(updates, dict):
            updates = updates.items()
        return self._call(wire.UpdatePriorities(table, [(int(k), float(p)) for k, p in updates])).applied

    def delete(self, table: str, keys: Iterable[int]) -> int:
        return self._call(wire.DeleteItems(table, [int(k) for k in keys])).deleted

    def checkpoint(self) -> str:
        return self._call(wire.CheckpointRequest()).checkpoint_id

    def server_info(self) -> dict[str, Any]:
        return self._call(wire.ServerInfoRequest()).info

    def close(self) -> None:
        with self._lock:
            if self._conn is not None:
                self._conn.close()
                self._conn = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ServerPool:
    """Independent servers used together: round-robin writes, merged sampling.

    Servers know nothing of each other. Endpoints default to the comma-separated
    ``REPLAYSTORE_ENDPOINTS`` environment variable.
    """

    def __init__(self, addresses: Sequence[str | Address] | None = None,
                 retry: RetryPolicy | None = None):
        if addresses is None:
            env = os.environ.get(ENDPOINTS_ENV, "")
            addresses = [a.strip() for a in env.split(",") if a.strip()]
        if not addresses:
            raise InvalidArgumentError("server pool needs at least one endpoint")
        self.retry = retry or RetryPolicy()
        self.clients = [Client(a, self.retry) for a in addresses]

    @property
    def addresses(self) -> list[Address]:
        return [c.address for c in self.clients]

    def writer(self, max_sequence_length: int, chunk_length: int | None = None, **kw) -> Writer:
        return Writer(self.addresses, WriterConfig(max_sequence_length, chunk_length, **kw))

    def sample_merged(self, table: str, **kw) -> Sampler:
        return Sampler(self.addresses, table, retry=kw.pop("retry", self.retry), **kw)

    def _each(self, fn):
        out = []
        for c in self.clients:
            try:
                out.append(fn(c))
            except TransportError as e:
                log.warning("%r unreachable: %s", c, e)
                out.append(e)
        if all(isinstance(r, TransportError) for r in out):
            raise out[-1]
        return out

    def update_priorities(self, table: str, updates) -> int:
        """Send updates to every server; keys are unique per server, so others skip them."""
        updates = list(updates.items() if isinstance(updates, dict) else updates)
        return sum(r for r in self._each(lambda c: c.update_priorities(table, updates))
                   if isinstance(r, int))

    def checkpoint(self) -> list[str | TransportError]:
        return self._each(lambda c: c.checkpoint())

    def server_info(self) -> list[dict | TransportError]:
        return self._each(lambda c: c.server_info())

    def close(self) -> None:
        for c in self.clients:
            c.close()
