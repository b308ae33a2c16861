"""The in-process replay service: chunk store, tables and checkpointing.

The network server is a thin layer over this class, and tests drive it
directly when the wire is not the subject.
"""

from __future__ import annotations

import itertools
import logging
import os
import random
import threading
import time
from typing import Any, Iterable, Sequence

from replaystore import checkpoint
from replaystore.chunks import DEFAULT_CODEC, Chunk, ChunkStore, Codec
from replaystore.errors import InvalidArgumentError, NotFoundError
from replaystore.table import Item, SampledItem, Table, TableConfig

log = logging.getLogger(__name__)

# item and chunk keys are prefix << 40 | counter so independent servers rarely collide
_PREFIX_SHIFT = 40


class ReplayService:
    def __init__(self, tables: Sequence[TableConfig], *, codec: Codec = DEFAULT_CODEC,
                 checkpoint_dir: str | os.PathLike | None = None, keep_checkpoints: int = 1,
                 key_prefix: int | None = None, restore_from: str | os.PathLike | None = None):
        self.codec = Codec(codec)
        self.checkpoint_dir = checkpoint_dir
        self.keep_checkpoints = keep_checkpoints
        self._key_lock = threading.Lock()

        if restore_from is not None:
            data = checkpoint.load(restore_from, checkpoint_dir)
            self._init_keys(data.metadata["key_prefix"], data.metadata["next_item_key"],
                            data.metadata["next_chunk_key"])
            self._restore(data)
            log.info("restored %d tables from %s", len(self.tables), restore_from)
            return

        if not tables:
            raise InvalidArgumentError("a server needs at least one table")
        names = [t.name for t in tables]
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"duplicate table names in {names}")
        if key_prefix is None:
            key_prefix = random.SystemRandom().randrange(1, 1 << 23)
        base = key_prefix << _PREFIX_SHIFT
        self._init_keys(key_prefix, base + 1, base + 1)
        self.tables: dict[str, Table] = {t.name: Table(t, self.store) for t in tables}

    def _init_keys(self, prefix: int, next_item: int, next_chunk: int) -> None:
        self.key_prefix = prefix
        self._item_keys = itertools.count(next_item)
        self.store = ChunkStore(key_base=next_chunk - 1)

    def _restore(self, data: checkpoint.CheckpointData) -> None:
        self.codec = Codec(data.metadata.get("codec", int(self.codec)))
        self.tables = {}
        for snap in data.tables:
            table = Table(snap.config, self.store)
            table.restore_locked(snap.items, snap.limiter, snap.rng, snap.sampler, snap.remover)
            self.tables[snap.config.name] = table

    def new_item_key(self) -> int:
        with self._key_lock:
            return next(self._item_keys)

    def table(self, name: str) -> Table:
        try:
            return self.tables[name]
        except KeyError:
            raise NotFoundError(f"table {name!r} not found") from None

    # operations

    def insert_item(self, table: str, chunks: Sequence[Chunk], offset: int, length: int,
                    priority: float, key: int | None = None,
                    timeout: float | None = None) -> int:
        t = self.table(table)
        key = key or self.new_item_key()
        t.insert_or_assign(Item(key, float(priority), list(chunks), offset, length), timeout)
        return key

    def sample(self, table: str, n: int = 1, timeout: float | None = None) -> list[SampledItem]:
        return self.table(table).sample(n, timeout)

    def update_priorities(self, table: str, updates: Iterable[tuple[int, float]]) -> int:
        return self.table(table).update_priorities(list(updates))

    def delete(self, table: str, keys: Iterable[int]) -> int:
        t = self.table(table)
        deleted = 0
        for key in keys:
            try:
                t.delete(key)
                deleted += 1
            except NotFoundError:
                pass
        return deleted

    def info(self) -> dict[str, Any]:
        return {
            "codec": self.codec.name.lower(),
            "key_prefix": self.key_prefix,
            "chunks": len(self.store),
            "tables": {name: t.info() for name, t in sorted(self.tables.items())},
        }

    def checkpoint(self, directory: str | os.PathLike | None = None) -> str:
        """Snapshot every table to disk, blocking all table operations meanwhile."""
        directory = directory or self.checkpoint_dir
        if directory is None:
            raise InvalidArgumentError("no checkpoint directory configured")
        ordered = [self.tables[n] for n in sorted(self.tables)]
        for t in ordered:
            t.acquire()
        try:
            with self._key_lock:
                next_item = next(self._item_keys)
                self._item_keys = itertools.count(next_item)
            next_chunk = self.store.new_key()
            metadata = {
                "codec": int(self.codec),
                "created": time.time(),
                "key_prefix": self.key_prefix,
                "next_item_key": next_item,
                "next_chunk_key": next_chunk + 1,
            }
            data = checkpoint.encode(metadata, [t.snapshot_locked() for t in ordered])
            return checkpoint.write_atomic(directory, data, keep=self.keep_checkpoints)
        finally:
            for t in reversed(ordered):
                t.release()

    def audit(self) -> list[str]:
        """Check every table plus store-wide reference counts against item references."""
        problems = []
        ordered = [self.tables[n] for n in sorted(self.tables)]
        for t in ordered:
            t.acquire()
        try:
            expected: dict[int, int] = {}
            for t in ordered:
                problems += [f"{t.name}: {p}" for p in t._audit_locked()]
                for item in t._items.values():
                    for c in item.chunks:
                        expected[c.key] = expected.get(c.key, 0) + 1
            actual = {k: v for k, v in self.store.refcounts().items() if v}
            if actual != expected:
                diff = {k for k in set(actual) | set(expected) if actual.get(k) != expected.get(k)}
                problems.append(f"chunk refcounts disagree with item references for {sorted(diff)[:5]}")
        finally:
            for t in reversed(ordered):
                t.release()
        return problems

    def close(self) -> None:
        for t in self.tables.values():
            t.close()
        self.store.close()
