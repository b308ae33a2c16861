"""Column-compressed chunks and the refcounted store that owns them."""

from __future__ import annotations

import enum
import itertools
import logging
import queue
import struct
import threading
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import lz4.block
import numpy as np

from replaystore.errors import InternalError, InvalidArgumentError, NotFoundError
from replaystore.tensors import Signature, check_signature, compare_signatures, unflatten

log = logging.getLogger(__name__)


class Codec(enum.IntEnum):
    NONE = 0
    LZ4 = 1
    ZLIB = 2


DEFAULT_CODEC = Codec.LZ4


def compress(data: bytes, codec: Codec) -> bytes:
    if codec == Codec.LZ4:
        return lz4.block.compress(data, store_size=False)
    if codec == Codec.ZLIB:
        return zlib.compress(data, 1)
    return bytes(data)


def decompress(data: bytes, codec: Codec, size: int) -> bytes:
    if size == 0:
        return b""
    try:
        if codec == Codec.LZ4:
            out = lz4.block.decompress(data, uncompressed_size=size)
        elif codec == Codec.ZLIB:
            # bounded so a hostile block cannot inflate past the declared size
            out = zlib.decompressobj().decompress(data, size + 1)
        else:
            out = bytes(data)
    except (lz4.block.LZ4BlockError, zlib.error) as e:
        raise InvalidArgumentError(f"corrupt column block: {e}") from None
    if len(out) != size:
        raise InvalidArgumentError(f"column block decoded to {len(out)} bytes, expected {size}")
    return out


# upper bounds on the expansion ratio of each codec, so a forged header
# cannot make a reader allocate far more than it received
_MAX_EXPANSION = {Codec.NONE: 1, Codec.LZ4: 256, Codec.ZLIB: 1100}


def _plausible(block_len: int, raw_len: int, codec: Codec) -> bool:
    if codec == Codec.NONE:
        return block_len == raw_len
    return raw_len <= block_len * _MAX_EXPANSION[codec] + 64


@dataclass(eq=False)
class Chunk:
    """K sequential steps stored column by column, each column compressed.

    ``columns[i]`` holds the compressed bytes of the rows of signature column
    ``i`` concatenated in step order.
    """

    key: int
    signature: Signature
    num_rows: int
    codec: Codec
    columns: tuple[bytes, ...]
    _encoded: bytes | None = field(default=None, repr=False)

    @property
    def uncompressed_bytes(self) -> int:
        return self.num_rows * self.signature.row_nbytes

    @property
    def compressed_bytes(self) -> int:
        return sum(len(c) for c in self.columns)

    def column_arrays(self) -> list[np.ndarray]:
        """Decompress every column into an array of shape ``(num_rows, *shape)``."""
        out = []
        for col, block in zip(self.signature.columns, self.columns):
            raw = decompress(block, self.codec, self.num_rows * col.row_nbytes)
            out.append(np.frombuffer(raw, dtype=col.dtype.numpy).reshape(
                (self.num_rows, *col.shape)))
        return out

    def steps(self) -> list:
        cols = self.column_arrays()
        return [unflatten([c[i] for c in cols], self.signature) for i in range(self.num_rows)]

    def with_key(self, key: int) -> "Chunk":
        return Chunk(key, self.signature, self.num_rows, self.codec, self.columns)

    def encode(self) -> bytes:
        if self._encoded is None:
            parts = [struct.pack("<QIB", self.key, self.num_rows, int(self.codec)),
                     self.signature.encode()]
            for block in self.columns:
                parts.append(struct.pack("<Q", len(block)))
                parts.append(block)
            self._encoded = b"".join(parts)
        return self._encoded

    @classmethod
    def decode(cls, buf, offset: int = 0) -> tuple["Chunk", int]:
        """Parse a chunk encoding at ``offset``; returns it and the end offset.

        Raises ``InvalidArgumentError`` on any truncation or inconsistency;
        never reads beyond ``len(buf)``.
        """
        view = memoryview(buf)
        start = offset
        if offset + 13 > len(view):
            raise InvalidArgumentError("truncated chunk header")
        key, num_rows, codec = struct.unpack_from("<QIB", view, offset)
        offset += 13
        try:
            codec = Codec(codec)
        except ValueError:
            raise InvalidArgumentError(f"unknown codec id {codec}") from None
        if num_rows < 1:
            raise InvalidArgumentError("chunk must hold at least one row")
        signature, offset = Signature.decode(view, offset)
        columns = []
        for _ in signature.columns:
            if offset + 8 > len(view):
                raise InvalidArgumentError("truncated column length")
            (n,) = struct.unpack_from("<Q", view, offset)
            offset += 8
            if n > len(view) - offset:
                raise InvalidArgumentError("column block overruns buffer")
            columns.append(bytes(view[offset:offset + n]))
            offset += n
        for col, block in zip(signature.columns, columns):
            if not _plausible(len(block), num_rows * col.row_nbytes, codec):
                raise InvalidArgumentError(
                    f"column {col.path!r}: {len(block)} byte block cannot hold "
                    f"{num_rows} rows of {col.row_nbytes} bytes")
        chunk = cls(key, signature, num_rows, codec, tuple(columns))
        chunk._encoded = bytes(view[start:offset])
        return chunk, offset


def build_chunk(key: int, steps: Sequence, signature: Signature,
                codec: Codec = DEFAULT_CODEC) -> Chunk:
    """Batch ``steps`` column-wise and compress each column."""
    if not steps:
        raise InvalidArgumentError("a chunk needs at least one step")
    flat = [check_signature(s, signature) for s in steps]
    return build_chunk_from_flat(key, flat, signature, codec)


def build_chunk_from_flat(key: int, rows: Sequence[Sequence[np.ndarray]],
                          signature: Signature, codec: Codec = DEFAULT_CODEC) -> Chunk:
    """Like ``build_chunk`` for steps that were already flattened and checked."""
    if not rows:
        raise InvalidArgumentError("a chunk needs at least one step")
    columns = []
    for i, col in enumerate(signature.columns):
        if len(rows) == 1:
            raw = rows[0][i].tobytes()
        else:
            raw = b"".join(r[i].tobytes() for r in rows)
        columns.append(compress(raw, codec))
    return Chunk(key, signature, len(rows), codec, tuple(columns))


class ChunkStore:
    """Thread-safe map of chunk key to chunk with per-chunk reference counts.

    A chunk whose count drops to zero is not removed inline: its key is queued
    and a background reclaimer drops it later, so tables may release references
    while holding their own lock without paying for deallocation there.
    ``on_reclaim`` is an instrumentation hook called with each key just before
    the reclaimer removes it.
    """

    def __init__(self, on_reclaim: Callable[[int], None] | None = None, key_base: int = 0):
        self._lock = threading.Lock()
        self._chunks: dict[int, Chunk] = {}
        self._refs: dict[int, int] = {}
        self._keys = itertools.count(key_base + 1)
        self._drop: queue.Queue = queue.Queue()
        self.on_reclaim = on_reclaim
        self._reclaimer = threading.Thread(target=self._reclaim_loop, daemon=True,
                                           name="chunk-reclaimer")
        self._reclaimer.start()

    def new_key(self) -> int:
        return next(self._keys)

    def reserve_keys_above(self, key: int) -> None:
        with self._lock:
            nxt = next(self._keys)
            self._keys = itertools.count(max(nxt, key + 1))

    def __len__(self) -> int:
        with self._lock:
            return len(self._chunks)

    def __contains__(self, key: int) -> bool:
        with self._lock:
            return key in self._chunks

    def insert(self, chunk: Chunk) -> None:
        with self._lock:
            if chunk.key not in self._chunks:
                self._chunks[chunk.key] = chunk
                self._refs[chunk.key] = 0

    def add_ref(self, key: int) -> int:
        with self._lock:
            if key not in self._refs:
                raise NotFoundError(f"chunk {key} not in store")
            self._refs[key] += 1
            return self._refs[key]

    def release_ref(self, key: int) -> int:
        with self._lock:
            count = self._refs.get(key)
            if not count:
                raise InternalError(f"release of chunk {key} with no live references")
            count -= 1
            self._refs[key] = count
        if count == 0:
            self._drop.put(key)
        return count

    def acquire(self, chunks: Iterable[Chunk]) -> None:
        """Insert each chunk if absent and take one reference on it."""
        with self._lock:
            for chunk in chunks:
                if chunk.key not in self._chunks:
                    self._chunks[chunk.key] = chunk
                    self._refs[chunk.key] = 1
                else:
                    self._refs[chunk.key] += 1

    def release(self, chunks: Iterable[Chunk]) -> None:
        dropped = []
        with self._lock:
            for chunk in chunks:
                count = self._refs.get(chunk.key)
                if not count:
                    raise InternalError(
                        f"release of chunk {chunk.key} with no live references")
                self._refs[chunk.key] = count - 1
                if count == 1:
                    dropped.append(chunk.key)
        for key in dropped:
            self._drop.put(key)

    def get(self, keys: Iterable[int]) -> list[Chunk]:
        with self._lock:
            try:
                return [self._chunks[k] for k in keys]
            except KeyError as e:
                raise NotFoundError(f"chunk {e.args[0]} not in store") from None

    def refcount(self, key: int) -> int:
        with self._lock:
            return self._refs.get(key, 0)

    def refcounts(self) -> dict[int, int]:
        with self._lock:
            return dict(self._refs)

    def chunks(self) -> list[Chunk]:
        with self._lock:
            return list(self._chunks.values())

    def quiesce(self) -> None:
        """Block until every queued reclamation has been processed."""
        self._drop.join()

    def close(self) -> None:
        self._drop.put(None)

    def _reclaim_loop(self) -> None:
        while True:
            key = self._drop.get()
            try:
                if key is None:
                    return
                with self._lock:
                    # re-acquired after being queued
                    if self._refs.get(key, 1) != 0:
                        continue
                hook = self.on_reclaim
                if hook is not None:
                    hook(key)
                chunk = None
                with self._lock:
                    if self._refs.get(key) == 0:
                        del self._refs[key]
                        chunk = self._chunks.pop(key)
                # last store reference dies here, outside every lock
                del chunk
            except Exception:
                log.exception("chunk reclamation failed for key %s", key)
            finally:
                self._drop.task_done()


def check_chunk_signature(chunk: Chunk, expected: Signature | None) -> None:
    if expected is not None:
        compare_signatures(chunk.signature, expected)
