"""TCP server exposing a ``ReplayService`` over the frame protocol in ``wire``.

Each connection gets its own handler thread. A connection may carry writer
traffic (chunks and items), unary calls, and sample streams one after the
other; a sample stream occupies the connection until it ends.
"""

from __future__ import annotations

import json
import logging
import os
import socketserver
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from replaystore import wire
from replaystore.chunks import DEFAULT_CODEC, Chunk, Codec
from replaystore.errors import (
    CancelledError, DeadlineExceededError, InvalidArgumentError, ReplayError, ResourceExhaustedError, TransportError)
from replaystore.service import ReplayService
from replaystore.table import TableConfig

log = logging.getLogger(__name__)

ADDRESS_ENV = "REPLAYSTORE_ADDRESS"

# how often a blocked sample stream wakes to notice a dead client
_SAMPLE_POLL_S = 0.5


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise InvalidArgumentError(f"address must look like host:port, got {address!r}")
    return host.strip("[]"), int(port)


@dataclass
class ServerConfig:
    tables: list[TableConfig]
    host: str = "127.0.0.1"
    port: int = 0
    checkpoint_dir: str | None = None
    keep_checkpoints: int = 1
    restore: bool = False
    codec: str = DEFAULT_CODEC.name.lower()
    max_message_bytes: int = wire.DEFAULT_MAX_MESSAGE_BYTES
    max_streams: int = 4096
    key_prefix: int | None = None

    def __post_init__(self):
        if not self.tables and not self.restore:
            raise InvalidArgumentError("server config needs at least one table")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ServerConfig":
        d = dict(d)
        tables = [t if isinstance(t, TableConfig) else TableConfig.from_dict(t)
                  for t in d.pop("tables", [])]
        return cls(tables=tables, **d)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ServerConfig":
        """Load a JSON config; ``REPLAYSTORE_ADDRESS`` (host:port) overrides the listen address."""
        cfg = cls.from_dict(json.loads(Path(path).read_text()))
        env = os.environ.get(ADDRESS_ENV)
        if env:
            cfg.host, cfg.port = parse_address(env)
        return cfg


# acks are held back while more requests are already buffered, up to this many
_MAX_HELD_ACKS = 64


class _WriterStream:
    __slots__ = ("chunks", "confirmed", "watermark", "acks")

    def __init__(self):
        self.chunks: dict[int, Chunk] = {}
        self.confirmed = 0
        self.watermark = 0
        self.acks: list[wire.InsertAck] = []

    def flush_acks(self, conn: wire.Connection) -> None:
        if self.acks:
            acks, self.acks = self.acks, []
            conn.send_many(acks)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        self.server.owner._serve_connection(self.request)


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 1024


class Server:
    """Run a replay server in background threads.

    >>> server = Server(ServerConfig(tables=[TableConfig("replay")])).start()
    >>> server.address  # doctest: +SKIP
    ('127.0.0.1', 40123)
    """

    def __init__(self, config: ServerConfig):
        self.config = config
        restore_from = None
        if config.restore and config.checkpoint_dir:
            from replaystore.checkpoint import list_checkpoints
            if list_checkpoints(config.checkpoint_dir):
                restore_from = config.checkpoint_dir
        self.service = ReplayService(
            config.tables, codec=Codec[config.codec.upper()],
            checkpoint_dir=config.checkpoint_dir, keep_checkpoints=config.keep_checkpoints,
            key_prefix=config.key_prefix, restore_from=restore_from)
        self._tcp: _TCPServer | None = None
        self._thread: threading.Thread | None = None
        self._stopped = False
        self._conns: set[wire.Connection] = set()
        self._conns_lock = threading.Lock()
        self.peak_outstanding = 0
        self.flow_violations = 0
        self.frames_received: dict[str, int] = {}

    @property
    def address(self) -> tuple[str, int]:
        if self._tcp is None:
            raise InvalidArgumentError("server not started")
        host, port = self._tcp.server_address[:2]
        return host, port

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def start(self) -> "Server":
        try:
            self._tcp = _TCPServer((self.config.host, self.config.port), _Handler)
        except OSError as e:
            raise ReplayError(f"cannot bind {self.config.host}:{self.config.port}: {e}") from e
        self._tcp.owner = self
        self._thread = threading.Thread(target=self._tcp.serve_forever,
                                        kwargs={"poll_interval": 0.1}, daemon=True,
                                        name="replay-server")
        self._thread.start()
        log.info("serving %d tables on %s", len(self.service.tables), self.endpoint)
        return self

    def stop(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        if self._tcp is not None:
            self._tcp.shutdown()
            self._tcp.server_close()
        self.service.close()
        with self._conns_lock:
            conns = list(self._conns)
        for conn in conns:
            conn.close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def wait(self) -> None:
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start() if self._tcp is None else self

    def __exit__(self, *exc):
        self.stop()

    # connection handling

    def _serve_connection(self, sock) -> None:
        conn = wire.Connection(sock, self.config.max_message_bytes)
        with self._conns_lock:
            if len(self._conns) >= self.config.max_streams:
                conn.send(wire.Error(ResourceExhaustedError.code, "too many concurrent streams"))
                conn.close()
                return
            self._conns.add(conn)
        writer = _WriterStream()
        try:
            while True:
                try:
                    msg = conn.recv()
                except TransportError:
                    return
                except ReplayError as e:
                    self._send_error(conn, e)
                    return
                counts = self.frames_received
                name = type(msg).__name__
                counts[name] = counts.get(name, 0) + 1
                try:
                    if writer.acks and not isinstance(msg, (wire.InsertChunk, wire.CreateItem)):
                        writer.flush_acks(conn)
                    keep_open = self._dispatch(conn, writer, msg)
                except TransportError:
                    return
                except CancelledError as e:
                    self._send_error(conn, e)
                    return
                except ReplayError as e:
                    try:
                        writer.flush_acks(conn)
                    except TransportError:
                        return
                    self._send_error(conn, e)
                    keep_open = not isinstance(msg, (wire.InsertChunk, wire.CreateItem,
                                                     wire.ReleaseChunks))
                if writer.acks and (len(writer.acks) >= _MAX_HELD_ACKS or not conn.has_frame()):
                    try:
                        writer.flush_acks(conn)
                    except TransportError:
                        return
                if not keep_open:
                    return
        except Exception:
            log.exception("connection handler crashed")
            self._send_error(conn, ReplayError("internal server error"))
        finally:
            with self._conns_lock:
                self._conns.discard(conn)
            conn.close()

    @staticmethod
    def _send_error(conn: wire.Connection, err: ReplayError) -> None:
        try:
            conn.send(wire.Error(err.code, str(err)))
        except TransportError:
            pass

    def _dispatch(self, conn: wire.Connection, writer: _WriterStream, msg: wire.Message) -> bool:
        service = self.service
        if isinstance(msg, wire.InsertChunk):
            chunk = msg.chunk
            writer.chunks[chunk.key] = chunk.with_key(service.store.new_key())
            writer.watermark = max(writer.watermark, chunk.key)
        elif isinstance(msg, wire.CreateItem):
            try:
                chunks = [writer.chunks[k] for k in msg.chunk_keys]
            except KeyError as e:
                raise InvalidArgumentError(
                    f"item references chunk {e.args[0]} that was never sent on this stream") from None
            try:
                key = service.insert_item(msg.table, chunks, msg.offset, msg.length,
                                          msg.priority, key=msg.key or None, timeout=0)
            except DeadlineExceededError:
                # about to block on the rate limiter: release held acks first
                writer.flush_acks(conn)
                key = service.insert_item(msg.table, chunks, msg.offset, msg.length,
                                          msg.priority, key=msg.key or None)
            writer.confirmed += 1
            writer.acks.append(wire.InsertAck(writer.confirmed, writer.watermark, key))
        elif isinstance(msg, wire.ReleaseChunks):
            for k in msg.chunk_keys:
                writer.chunks.pop(k, None)
        elif isinstance(msg, wire.SampleRequest):
            self._sample_stream(conn, msg)
        elif isinstance(msg, wire.UpdatePriorities):
            conn.send(wire.UpdatePrioritiesReply(service.update_priorities(msg.table, msg.updates)))
        elif isinstance(msg, wire.DeleteItems):
            conn.send(wire.DeleteItemsReply(service.delete(msg.table, msg.keys)))
        elif isinstance(msg, wire.CheckpointRequest):
            conn.send(wire.CheckpointReply(service.checkpoint()))
        elif isinstance(msg, wire.ServerInfoRequest):
            conn.send(wire.ServerInfoReply(service.info()))
        elif isinstance(msg, wire.SampleAck):
            pass  # late credit for a stream that already ended
        else:
            raise InvalidArgumentError(f"unexpected message {type(msg).__name__}")
        return True

    def _sample_stream(self, conn: wire.Connection, req: wire.SampleRequest) -> None:
        table = self.service.table(req.table)
        window = req.max_in_flight
        deadline = None if req.timeout_ms < 0 else req.timeout_ms / 1000.0
        outstanding = 0
        sent = 0
        while req.num_samples < 0 or sent < req.num_samples:
            # credits are only read when the window is full or already buffered
            while outstanding >= window or conn.has_frame():
                outstanding -= min(self._read_ack(conn), outstanding)
            if deadline is not None:
                deadline_at = time.monotonic() + deadline
            while True:
                # wake periodically so a vanished client does not pin this thread
                remaining = _SAMPLE_POLL_S if deadline is None else min(
                    _SAMPLE_POLL_S, max(0.0, deadline_at - time.monotonic()))
                items = table.sample(1, remaining)
                if items:
                    break
                if deadline is not None and time.monotonic() >= deadline_at:
                    conn.send(wire.EndOfSequence(timed_out=True))
                    return
                if conn.poll(0):
                    outstanding -= min(self._read_ack(conn), outstanding)
            # top up with whatever is admissible right now, within the window
            room = window - outstanding - 1
            if req.num_samples >= 0:
                room = min(room, req.num_samples - sent - 1)
            if room > 0:
                items += table.sample(room, 0)
            conn.send_many([wire.SampleResponse(s.key, s.priority, s.times_sampled, s.probability,
                                                s.table_size, s.offset, s.length, s.chunks)
                            for s in items])
            outstanding += len(items)
            sent += len(items)
            if outstanding > self.peak_outstanding:
                self.peak_outstanding = outstanding
            if outstanding > window:
                self.flow_violations += 1
        conn.send(wire.EndOfSequence(timed_out=False))

    @staticmethod
    def _read_ack(conn: wire.Connection) -> int:
        msg = conn.recv()
        if not isinstance(msg, wire.SampleAck):
            raise InvalidArgumentError(
                f"expected SampleAck during a sample stream, got {type(msg).__name__}")
        return msg.credits
