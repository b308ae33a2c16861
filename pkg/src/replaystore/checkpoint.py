"""On-disk snapshots of tables and the chunks they reference.

File layout (little-endian):

    magic "RPLYCKPT" | version u32
    metadata: u32 length + JSON
    tables:   u32 count, then per table
                u32 length + JSON header (config, limiter counters, rng state,
                                          selector auxiliary state)
                items:   u64 count, each key u64 priority f64 offset u32
                         length u32 times_sampled u32 n u32 chunk_keys u64*n
                sampler: u64 count, each key u64 priority f64
                remover: u64 count, each key u64 priority f64
    chunks:   u64 count, each u64 length + chunk encoding
    sha256 of everything above (32 bytes)
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from replaystore.chunks import Chunk
from replaystore.errors import InvalidArgumentError, NotFoundError, ReplayError
from replaystore.table import Item, TableConfig

log = logging.getLogger(__name__)

MAGIC = b"RPLYCKPT"
VERSION = 1
SUFFIX = ".ckpt"
_HASH_LEN = 32


class CheckpointError(ReplayError):
    code = 2


@dataclass
class TableSnapshot:
    config: TableConfig
    items: list[Item]
    limiter: tuple[int, int, int]
    rng: Any
    sampler: tuple[list[tuple[int, float]], dict]
    remover: tuple[list[tuple[int, float]], dict]


@dataclass
class CheckpointData:
    metadata: dict[str, Any]
    tables: list[TableSnapshot]
    chunks: dict[int, Chunk]


def _rng_to_json(state):
    version, internal, gauss = state
    return [version, list(internal), gauss]


def _rng_from_json(state):
    if state is None:
        return None
    version, internal, gauss = state
    return (version, tuple(internal), gauss)


def encode(metadata: dict[str, Any], tables: list[dict[str, Any]]) -> bytes:
    """Serialize table snapshots (as produced by ``Table.snapshot_locked``)."""
    out = [MAGIC, struct.pack("<I", VERSION)]
    meta = json.dumps(metadata, sort_keys=True).encode()
    out += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(tables))]
    chunks: dict[int, Chunk] = {}
    for snap in sorted(tables, key=lambda s: s["config"].name):
        header = json.dumps({
            "config": snap["config"].to_dict(),
            "limiter": list(snap["limiter"]),
            "rng": _rng_to_json(snap["rng"]),
            "sampler_extra": snap["sampler"][1],
            "remover_extra": snap["remover"][1],
        }, sort_keys=True).encode()
        out += [struct.pack("<I", len(header)), header]
        items = snap["items"]
        out.append(struct.pack("<Q", len(items)))
        for item in items:
            keys = [c.key for c in item.chunks]
            for c in item.chunks:
                chunks[c.key] = c
            out.append(struct.pack(f"<QdIIII{len(keys)}Q", item.key, item.priority, item.offset,
                                   item.length, item.times_sampled, len(keys), *keys))
        for entries, _ in (snap["sampler"], snap["remover"]):
            out.append(struct.pack("<Q", len(entries)))
            out += [struct.pack("<Qd", k, p) for k, p in entries]
    out.append(struct.pack("<Q", len(chunks)))
    for key in sorted(chunks):
        enc = chunks[key].encode()
        out += [struct.pack("<Q", len(enc)), enc]
    body = b"".join(out)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> CheckpointData:
    if len(data) < len(MAGIC) + 4 + _HASH_LEN or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    body, digest = data[:-_HASH_LEN], data[-_HASH_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint integrity hash mismatch (corrupt or truncated)")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    metadata = json.loads(bytes(r.take(n)))
    (num_tables,) = r.unpack("<I")
    raw_tables = []
    for _ in range(num_tables):
        (n,) = r.unpack("<I")
        header = json.loads(bytes(r.take(n)))
        (num_items,) = r.unpack("<Q")
        items = []
        for _ in range(num_items):
            key, prio, offset, length, times, nk = r.unpack("<QdIIII")
            items.append((key, prio, offset, length, times, r.unpack(f"<{nk}Q")))
        selectors = []
        for _ in range(2):
            (count,) = r.unpack("<Q")
            selectors.append([r.unpack("<Qd") for _ in range(count)])
        raw_tables.append((header, items, selectors))
    (num_chunks,) = r.unpack("<Q")
    chunks: dict[int, Chunk] = {}
    for _ in range(num_chunks):
        (n,) = r.unpack("<Q")
        try:
            chunk, _ = Chunk.decode(r.take(n))
        except InvalidArgumentError as e:
            raise CheckpointError(f"corrupt chunk in checkpoint: {e}") from None
        chunks[chunk.key] = chunk
    if r.pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")

    tables = []
    for header, items, (sampler, remover) in raw_tables:
        try:
            built = [Item(key, prio, [chunks[k] for k in keys], offset, length, times)
                     for key, prio, offset, length, times, keys in items]
        except KeyError as e:
            raise CheckpointError(f"item references chunk {e.args[0]} missing from checkpoint") from None
        tables.append(TableSnapshot(
            config=TableConfig.from_dict(header["config"]),
            items=built,
            limiter=tuple(header["limiter"]),
            rng=_rng_from_json(header["rng"]),
            sampler=([(k, p) for k, p in sampler], header["sampler_extra"]),
            remover=([(k, p) for k, p in remover], header["remover_extra"]),
        ))
    return CheckpointData(metadata, tables, chunks)


def write_atomic(directory: str | os.PathLike, data: bytes, keep: int = 1) -> str:
    """Write ``data`` as a new checkpoint file and prune old ones. Returns the checkpoint id."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ckpt_id = f"ckpt-{time.time_ns():020d}"
    final = directory / (ckpt_id + SUFFIX)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=SUFFIX)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, final)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    if keep > 0:
        for old in list_checkpoints(directory)[:-keep]:
            old.unlink(missing_ok=True)
    log.info("wrote checkpoint %s (%d bytes)", final, len(data))
    return ckpt_id


def list_checkpoints(directory: str | os.PathLike) -> list[Path]:
    return sorted(Path(directory).glob("ckpt-*" + SUFFIX))


def resolve(path_or_id: str | os.PathLike, directory: str | os.PathLike | None = None) -> Path:
    """Find a checkpoint file from a file path, a directory (latest wins) or an id."""
    p = Path(path_or_id)
    if p.is_file():
        return p
    if p.is_dir():
        found = list_checkpoints(p)
        if not found:
            raise NotFoundError(f"no checkpoints in {p}")
        return found[-1]
    if directory is not None:
        candidate = Path(directory) / (str(path_or_id) + SUFFIX)
        if candidate.is_file():
            return candidate
    raise NotFoundError(f"checkpoint {path_or_id!s} not found")


def load(path_or_id: str | os.PathLike, directory: str | os.PathLike | None = None) -> CheckpointData:
    path = resolve(path_or_id, directory)
    return decode(path.read_bytes())
