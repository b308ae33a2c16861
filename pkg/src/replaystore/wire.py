"""Length-prefixed binary messages exchanged between clients and the server.

Every frame is ``u32 length | u8 tag | payload`` where ``length`` counts the
tag byte plus the payload. All integers are little-endian. Strings are
``u16 length + utf-8``.
"""

from __future__ import annotations

import json
import select
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Any, ClassVar

from replaystore.chunks import Chunk
from replaystore.errors import InvalidArgumentError, ResourceExhaustedError, TransportError

DEFAULT_MAX_MESSAGE_BYTES = 256 * 1024 * 1024
UNBOUNDED = -1

_HEADER = struct.Struct("<IB")


class ProtocolError(InvalidArgumentError):
    pass


class _Buf:
    """Bounds-checked cursor over a payload."""

    __slots__ = ("view", "pos")

    def __init__(self, payload):
        self.view = memoryview(payload)
        self.pos = 0

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.view):
            raise ProtocolError("message truncated")
        out = struct.unpack_from(fmt, self.view, self.pos)
        self.pos += size
        return out

    def string(self) -> str:
        (n,) = self.unpack("<H")
        if self.pos + n > len(self.view):
            raise ProtocolError("string overruns message")
        s = bytes(self.view[self.pos:self.pos + n])
        self.pos += n
        try:
            return s.decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("invalid utf-8 string") from None

    def blob(self) -> bytes:
        (n,) = self.unpack("<Q")
        if n > len(self.view) - self.pos:
            raise ProtocolError("blob overruns message")
        out = bytes(self.view[self.pos:self.pos + n])
        self.pos += n
        return out

    def chunk(self) -> Chunk:
        chunk, self.pos = Chunk.decode(self.view, self.pos)
        return chunk

    def done(self) -> None:
        if self.pos != len(self.view):
            raise ProtocolError(f"{len(self.view) - self.pos} trailing bytes in message")


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise InvalidArgumentError("string too long for wire encoding")
    return struct.pack("<H", len(b)) + b


def _json(obj) -> bytes:
    b = json.dumps(obj).encode()
    return struct.pack("<Q", len(b)) + b


MESSAGES: dict[int, type["Message"]] = {}


class Message:
    TAG: ClassVar[int]

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        MESSAGES[cls.TAG] = cls

    def payload(self) -> bytes:
        return b""

    @classmethod
    def parse(cls, buf: _Buf) -> "Message":
        return cls()

    def encode(self) -> bytes:
        body = self.payload()
        return _HEADER.pack(len(body) + 1, self.TAG) + body


@dataclass
class InsertChunk(Message):
    TAG = 1
    chunk: Chunk

    def payload(self):
        return self.chunk.encode()

    @classmethod
    def parse(cls, buf):
        return cls(buf.chunk())


@dataclass
class CreateItem(Message):
    """Create an item from chunks previously sent on this stream.

    ``chunk_keys`` are the writer's own keys; ``key`` 0 lets the server pick one.
    """

    TAG = 2
    table: str
    chunk_keys: list[int]
    offset: int
    length: int
    priority: float
    key: int = 0

    def payload(self):
        n = len(self.chunk_keys)
        return _str(self.table) + struct.pack(
            f"<QIIdI{n}Q", self.key, self.offset, self.length, self.priority, n, *self.chunk_keys)

    @classmethod
    def parse(cls, buf):
        table = buf.string()
        key, offset, length, priority, n = buf.unpack("<QIIdI")
        keys = list(buf.unpack(f"<{n}Q")) if n else []
        return cls(table, keys, offset, length, priority, key)


@dataclass
class InsertAck(Message):
    """``confirmed`` items inserted so far on the stream; chunks up to ``watermark`` arrived."""

    TAG = 3
    confirmed: int
    watermark: int
    key: int = 0

    def payload(self):
        return struct.pack("<QQQ", self.confirmed, self.watermark, self.key)

    @classmethod
    def parse(cls, buf):
        return cls(*buf.unpack("<QQQ"))


@dataclass
class ReleaseChunks(Message):
    """The writer will never reference these chunk keys again."""

    TAG = 4
    chunk_keys: list[int]

    def payload(self):
        return struct.pack(f"<I{len(self.chunk_keys)}Q", len(self.chunk_keys), *self.chunk_keys)

    @classmethod
    def parse(cls, buf):
        (n,) = buf.unpack("<I")
        return cls(list(buf.unpack(f"<{n}Q")) if n else [])


@dataclass
class SampleRequest(Message):
    TAG = 5
    table: str
    max_in_flight: int = 1
    num_samples: int = UNBOUNDED
    timeout_ms: int = -1

    def payload(self):
        return _str(self.table) + struct.pack("<Iqq", self.max_in_flight, self.num_samples,
                                              self.timeout_ms)

    @classmethod
    def parse(cls, buf):
        table = buf.string()
        max_in_flight, num_samples, timeout_ms = buf.unpack("<Iqq")
        if max_in_flight < 1:
            raise ProtocolError("max_in_flight must be >= 1")
        if timeout_ms < -1:
            raise ProtocolError("timeout_ms must be >= -1")
        return cls(table, max_in_flight, num_samples, timeout_ms)


@dataclass
class SampleResponse(Message):
    TAG = 6
    key: int
    priority: float
    times_sampled: int
    probability: float
    table_size: int
    offset: int
    length: int
    chunks: list[Chunk] = field(default_factory=list)

    def payload(self):
        head = struct.pack("<QdIdQIII", self.key, self.priority, self.times_sampled,
                           self.probability, self.table_size, self.offset, self.length,
                           len(self.chunks))
        return head + b"".join(c.encode() for c in self.chunks)

    @classmethod
    def parse(cls, buf):
        key, prio, times, prob, size, offset, length, n = buf.unpack("<QdIdQIII")
        chunks = [buf.chunk() for _ in range(n)]
        return cls(key, prio, times, prob, size, offset, length, chunks)

    @property
    def rows_transmitted(self) -> int:
        return sum(c.num_rows for c in self.chunks)


@dataclass
class SampleAck(Message):
    TAG = 7
    credits: int = 1

    def payload(self):
        return struct.pack("<I", self.credits)

    @classmethod
    def parse(cls, buf):
        return cls(*buf.unpack("<I"))


@dataclass
class EndOfSequence(Message):
    """Sent when a sample stream ends: the request was satisfied or the wait timed out."""

    TAG = 8
    timed_out: bool = False

    def payload(self):
        return struct.pack("<?", self.timed_out)

    @classmethod
    def parse(cls, buf):
        return cls(*buf.unpack("<?"))


@dataclass
class UpdatePriorities(Message):
    TAG = 9
    table: str
    updates: list[tuple[int, float]]

    def payload(self):
        flat = [v for kv in self.updates for v in kv]
        return _str(self.table) + struct.pack(f"<I{'Qd' * len(self.updates)}",
                                              len(self.updates), *flat)

    @classmethod
    def parse(cls, buf):
        table = buf.string()
        (n,) = buf.unpack("<I")
        return cls(table, [buf.unpack("<Qd") for _ in range(n)])


@dataclass
class UpdatePrioritiesReply(Message):
    TAG = 10
    applied: int

    def payload(self):
        return struct.pack("<Q", self.applied)

    @classmethod
    def parse(cls, buf):
        return cls(*buf.unpack("<Q"))


@dataclass
class CheckpointRequest(Message):
    TAG = 11


@dataclass
class CheckpointReply(Message):
    TAG = 12
    checkpoint_id: str

    def payload(self):
        return _str(self.checkpoint_id)

    @classmethod
    def parse(cls, buf):
        return cls(buf.string())


@dataclass
class ServerInfoRequest(Message):
    TAG = 13


@dataclass
class ServerInfoReply(Message):
    TAG = 14
    info: dict[str, Any]

    def payload(self):
        return _json(self.info)

    @classmethod
    def parse(cls, buf):
        try:
            return cls(json.loads(buf.blob()))
        except ValueError:
            raise ProtocolError("invalid server info json") from None


@dataclass
class DeleteItems(Message):
    TAG = 15
    table: str
    keys: list[int]

    def payload(self):
        return _str(self.table) + struct.pack(f"<I{len(self.keys)}Q", len(self.keys), *self.keys)

    @classmethod
    def parse(cls, buf):
        table = buf.string()
        (n,) = buf.unpack("<I")
        return cls(table, list(buf.unpack(f"<{n}Q")) if n else [])


@dataclass
class DeleteItemsReply(Message):
    TAG = 16
    deleted: int

    def payload(self):
        return struct.pack("<Q", self.deleted)

    @classmethod
    def parse(cls, buf):
        return cls(*buf.unpack("<Q"))


@dataclass
class Error(Message):
    TAG = 17
    code: int
    detail: str

    def payload(self):
        detail = self.detail.encode("utf-8")[:0xFFFF].decode("utf-8", "ignore")
        return struct.pack("<B", self.code) + _str(detail)

    @classmethod
    def parse(cls, buf):
        (code,) = buf.unpack("<B")
        return cls(code, buf.string())


def decode_payload(tag: int, payload) -> Message:
    try:
        cls = MESSAGES[tag]
    except KeyError:
        raise ProtocolError(f"unknown message tag {tag}") from None
    buf = _Buf(payload)
    msg = cls.parse(buf)
    buf.done()
    return msg


def decode_frame(frame: bytes, max_bytes: int = DEFAULT_MAX_MESSAGE_BYTES) -> tuple[Message, int]:
    """Decode the first frame in ``frame``; returns the message and bytes consumed."""
    if len(frame) < 4:
        raise ProtocolError("frame header truncated")
    (length,) = struct.unpack_from("<I", frame)
    if length < 1:
        raise ProtocolError("frame length must cover the tag byte")
    if length > max_bytes:
        raise ResourceExhaustedError(f"frame of {length} bytes exceeds limit {max_bytes}")
    if 4 + length > len(frame):
        raise ProtocolError("frame body truncated")
    tag = frame[4]
    return decode_payload(tag, memoryview(frame)[5:4 + length]), 4 + length


class Connection:
    """A socket speaking the frame protocol. Sends are serialized; reads are not."""

    def __init__(self, sock: socket.socket, max_bytes: int = DEFAULT_MAX_MESSAGE_BYTES):
        self.sock = sock
        if sock.family in (socket.AF_INET, socket.AF_INET6):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.max_bytes = max_bytes
        self._buf = bytearray()
        self._send_lock = threading.Lock()
        self.closed = False

    @classmethod
    def connect(cls, address: tuple[str, int], timeout: float | None = 10.0) -> "Connection":
        try:
            sock = socket.create_connection(address, timeout=timeout)
        except OSError as e:
            raise TransportError(f"cannot connect to {address[0]}:{address[1]}: {e}") from e
        sock.settimeout(None)
        return cls(sock)

    def send(self, msg: Message) -> None:
        self.send_bytes(msg.encode())

    def send_many(self, msgs) -> None:
        self.send_bytes(b"".join(m.encode() for m in msgs))

    def send_bytes(self, data: bytes) -> None:
        try:
            with self._send_lock:
                self.sock.sendall(data)
        except OSError as e:
            raise TransportError(f"send failed: {e}") from e

    def _fill(self, n: int) -> None:
        buf = self._buf
        while len(buf) < n:
            try:
                data = self.sock.recv(max(65536, n - len(buf)))
            except OSError as e:
                raise TransportError(f"receive failed: {e}") from e
            if not data:
                raise TransportError("connection closed by peer")
            buf += data

    def _take(self, n: int) -> bytes:
        self._fill(n)
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def recv(self) -> Message:
        """Read one message. Raises ``TransportError`` on EOF and protocol errors on bad frames."""
        self._fill(5)
        length, tag = _HEADER.unpack_from(self._buf)
        if length < 1:
            raise ProtocolError("frame length must cover the tag byte")
        if length > self.max_bytes:
            raise ResourceExhaustedError(
                f"frame of {length} bytes exceeds limit {self.max_bytes}")
        del self._buf[:5]
        payload = self._take(length - 1) if length > 1 else b""
        return decode_payload(tag, payload)

    def has_frame(self) -> bool:
        """True if a complete frame is already buffered, so ``recv`` needs no syscall."""
        buf = self._buf
        if len(buf) < 4:
            return False
        (length,) = struct.unpack_from("<I", buf)
        return len(buf) >= 4 + length

    def poll(self, timeout: float = 0.0) -> bool:
        """True if a read would find data (or EOF) without waiting longer than ``timeout``."""
        if self._buf:
            return True
        try:
            readable, _, _ = select.select([self.sock], [], [], timeout)
        except (OSError, ValueError):
            return True
        return bool(readable)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
