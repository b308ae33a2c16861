"""Tables: keyed items gated by a rate limiter, picked by selectors."""

from __future__ import annotations

import logging
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

from replaystore import selectors
from replaystore.chunks import Chunk, ChunkStore
from replaystore.errors import (
    CancelledError, DeadlineExceededError, InternalError, InvalidArgumentError, NotFoundError)
from replaystore.rate_limiter import RateLimiter, RateLimiterConfig, make_min_size
from replaystore.tensors import Signature, compare_signatures

log = logging.getLogger(__name__)

_local = threading.local()


def in_critical_section() -> bool:
    """True while the calling thread holds some table's lock."""
    return getattr(_local, "depth", 0) > 0


@dataclass
class Item:
    key: int
    priority: float
    chunks: list[Chunk]
    offset: int
    length: int
    times_sampled: int = 0

    @property
    def chunk_keys(self) -> list[int]:
        return [c.key for c in self.chunks]

    def validate(self) -> None:
        if not self.chunks:
            raise InvalidArgumentError("item must reference at least one chunk")
        if self.length < 1:
            raise InvalidArgumentError("item length must be positive")
        if not 0 <= self.offset < self.chunks[0].num_rows:
            raise InvalidArgumentError(
                f"offset {self.offset} outside first chunk of {self.chunks[0].num_rows} rows")
        rows = sum(c.num_rows for c in self.chunks)
        if self.offset + self.length > rows:
            raise InvalidArgumentError(
                f"offset {self.offset} + length {self.length} exceeds {rows} referenced rows")
        if rows - self.chunks[-1].num_rows >= self.offset + self.length:
            raise InvalidArgumentError("item references a trailing chunk it does not use")


@dataclass
class SampledItem:
    key: int
    priority: float
    times_sampled: int
    probability: float
    table_size: int
    offset: int
    length: int
    chunks: list[Chunk]

    @property
    def rows_transmitted(self) -> int:
        return sum(c.num_rows for c in self.chunks)


@dataclass
class TableConfig:
    name: str
    sampler: dict[str, Any] = field(default_factory=lambda: {"type": "uniform"})
    remover: dict[str, Any] = field(default_factory=lambda: {"type": "fifo"})
    max_size: int = 1_000_000
    max_times_sampled: int = 0
    rate_limiter: RateLimiterConfig = field(default_factory=lambda: make_min_size(1))
    signature: Signature | None = None
    extensions: list[str] = field(default_factory=list)
    rng_seed: int = 0

    def __post_init__(self):
        if not self.name:
            raise InvalidArgumentError("table name must be non-empty")
        if self.max_size < 1:
            raise InvalidArgumentError("max_size must be >= 1")
        if self.max_times_sampled < 0:
            raise InvalidArgumentError("max_times_sampled must be >= 0")
        if isinstance(self.sampler, str):
            self.sampler = {"type": self.sampler}
        if isinstance(self.remover, str):
            self.remover = {"type": self.remover}
        if isinstance(self.rate_limiter, dict):
            self.rate_limiter = RateLimiterConfig.from_dict(self.rate_limiter)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "sampler": dict(self.sampler),
            "remover": dict(self.remover),
            "max_size": self.max_size,
            "max_times_sampled": self.max_times_sampled,
            "rate_limiter": self.rate_limiter.to_dict(),
            "signature": self.signature.encode().hex() if self.signature else None,
            "extensions": list(self.extensions),
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TableConfig":
        sig = d.get("signature")
        if isinstance(sig, str):
            sig = Signature.decode(bytes.fromhex(sig))[0]
        return cls(
            name=d["name"],
            sampler=d.get("sampler", {"type": "uniform"}),
            remover=d.get("remover", {"type": "fifo"}),
            max_size=int(d.get("max_size", 1_000_000)),
            max_times_sampled=int(d.get("max_times_sampled", 0)),
            rate_limiter=RateLimiterConfig.from_dict(d.get("rate_limiter", {"type": "min_size", "min_size": 1})),
            signature=sig,
            extensions=list(d.get("extensions", [])),
            rng_seed=int(d.get("rng_seed", d.get("seed", 0))),
        )


class TableExtension:
    """Hooks run inside the table's critical section, once per mutation.

    Callbacks must be fast and must not call back into the table.
    """

    name = ""

    def attach(self, table: "Table") -> None:
        self.table = table

    def on_insert(self, item: Item) -> None:
        pass

    def on_sample(self, item: Item) -> None:
        pass

    def on_update(self, item: Item) -> None:
        pass

    def on_delete(self, item: Item) -> None:
        pass


class StatsExtension(TableExtension):
    """Counts operations and the amount of item data inserted and sampled.

    Also tracks the range the limiter cursor has occupied after every insert
    and sample, which makes it a cheap witness for ratio enforcement.
    """

    name = "stats"

    def __init__(self):
        self.inserts = self.samples = self.updates = self.deletes = 0
        self.inserted_bytes = self.sampled_bytes = 0
        self.min_diff_seen = float("inf")
        self.max_diff_seen = float("-inf")
        self.violations = 0

    def _item_bytes(self, item: Item) -> int:
        return item.length * item.chunks[0].signature.row_nbytes

    def _track(self) -> float:
        diff = self.table.rate_limiter.diff
        self.min_diff_seen = min(self.min_diff_seen, diff)
        self.max_diff_seen = max(self.max_diff_seen, diff)
        return diff

    def on_insert(self, item):
        self.inserts += 1
        self.inserted_bytes += self._item_bytes(item)
        if self._track() > self.table.rate_limiter.config.max_diff:
            self.violations += 1

    def on_sample(self, item):
        self.samples += 1
        self.sampled_bytes += self._item_bytes(item)
        if self._track() < self.table.rate_limiter.config.min_diff:
            self.violations += 1

    def on_update(self, item):
        self.updates += 1

    def on_delete(self, item):
        self.deletes += 1

    def snapshot(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in (
            "inserts", "samples", "updates", "deletes", "inserted_bytes",
            "sampled_bytes", "min_diff_seen", "max_diff_seen", "violations")}


EXTENSIONS = {StatsExtension.name: StatsExtension}


class Table:
    """A named collection of items.

    One lock guards items, selectors, the rate limiter and extensions. Blocked
    inserters and samplers wait on conditions tied to that lock.
    """

    def __init__(self, config: TableConfig, store: ChunkStore,
                 extensions: Sequence[TableExtension] = ()):
        self.config = config
        self.name = config.name
        self.store = store
        self._lock = threading.Lock()
        self._insert_cv = threading.Condition(self._lock)
        self._sample_cv = threading.Condition(self._lock)
        self._items: dict[int, Item] = {}
        self.sampler = selectors.from_config(config.sampler)
        self.remover = selectors.from_config(config.remover)
        self.rate_limiter = RateLimiter(config.rate_limiter)
        self._rng = random.Random(config.rng_seed)
        self.extensions: list[TableExtension] = []
        for ext in config.extensions:
            self.add_extension(EXTENSIONS[ext]() if isinstance(ext, str) else ext)
        for ext in extensions:
            self.add_extension(ext)
        self._closed = False

    def add_extension(self, ext: TableExtension) -> TableExtension:
        with self._locked():
            ext.attach(self)
            self.extensions.append(ext)
        return ext

    def extension(self, name: str) -> TableExtension:
        for ext in self.extensions:
            if ext.name == name:
                return ext
        raise NotFoundError(f"table {self.name!r} has no extension {name!r}")

    # locking

    def _locked(self):
        return _Critical(self._lock)

    def acquire(self) -> None:
        """Take the table lock from outside (checkpointing)."""
        self._lock.acquire()
        _local.depth = getattr(_local, "depth", 0) + 1

    def release(self) -> None:
        _local.depth -= 1
        self._lock.release()

    def close(self) -> None:
        """Wake every blocked caller with ``CancelledError`` and refuse new work."""
        with self._locked():
            self._closed = True
            self._insert_cv.notify_all()
            self._sample_cv.notify_all()

    def _check_open(self):
        if self._closed:
            raise CancelledError(f"table {self.name!r} is closed")

    @staticmethod
    def _wait(cv: threading.Condition, deadline: float | None) -> bool:
        if deadline is None:
            cv.wait()
            return True
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return False
        cv.wait(remaining)
        return True

    # operations

    def insert_or_assign(self, item: Item, timeout: float | None = None) -> bool:
        """Insert ``item`` or, if its key exists, replace its priority.

        Blocks while the rate limiter refuses inserts; raises
        ``DeadlineExceededError`` after ``timeout`` seconds with the table
        unchanged. Returns True for a new insert, False for an assignment.
        """
        if item.priority < 0 or item.priority != item.priority:
            raise InvalidArgumentError(f"invalid priority {item.priority}")
        item.validate()
        sig = self.config.signature
        if sig is not None:
            for chunk in item.chunks:
                compare_signatures(chunk.signature, sig)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._locked():
            while True:
                self._check_open()
                existing = self._items.get(item.key)
                if existing is not None:
                    existing.priority = item.priority
                    self.sampler.update(item.key, item.priority)
                    self.remover.update(item.key, item.priority)
                    for ext in self.extensions:
                        ext.on_update(existing)
                    return False
                if self.rate_limiter.can_insert(len(self._items)):
                    break
                if not self._wait(self._insert_cv, deadline):
                    raise DeadlineExceededError(
                        f"insert into {self.name!r} timed out after {timeout}s")
            if len(self._items) >= self.config.max_size:
                victim, _ = self.remover.select(self._rng.random())
                self._delete_locked(victim)
            self.store.acquire(item.chunks)
            item.times_sampled = 0
            self._items[item.key] = item
            self.sampler.insert(item.key, item.priority)
            self.remover.insert(item.key, item.priority)
            self.rate_limiter.record_insert()
            for ext in self.extensions:
                ext.on_insert(item)
            self._sample_cv.notify_all()
            return True

    def sample(self, n: int = 1, timeout: float | None = None) -> list[SampledItem]:
        """Select ``n`` items, each selection atomic on its own.

        Waits for the rate limiter before each selection. If ``timeout``
        seconds pass first, returns the items collected so far; a result
        shorter than ``n`` therefore means end of data.
        """
        if n < 1:
            raise InvalidArgumentError("n must be >= 1")
        deadline = None if timeout is None else time.monotonic() + timeout
        out: list[SampledItem] = []
        max_times = self.config.max_times_sampled
        with self._locked():
            for _ in range(n):
                while True:
                    self._check_open()
                    size = len(self._items)
                    if size and self.rate_limiter.can_sample(size):
                        break
                    if not self._wait(self._sample_cv, deadline):
                        return out
                key, probability = self.sampler.select(self._rng.random())
                item = self._items[key]
                item.times_sampled += 1
                out.append(SampledItem(key, item.priority, item.times_sampled, probability,
                                       len(self._items), item.offset, item.length,
                                       list(item.chunks)))
                self.rate_limiter.record_sample()
                for ext in self.extensions:
                    ext.on_sample(item)
                if max_times and item.times_sampled >= max_times:
                    self._delete_locked(key)
                self._insert_cv.notify_all()
        return out

    def update_priorities(self, updates: Sequence[tuple[int, float]]) -> int:
        """Apply ``(key, priority)`` updates; unknown keys are skipped. Returns the applied count."""
        for _, priority in updates:
            if not (0 <= priority < float("inf")):
                raise InvalidArgumentError(f"invalid priority {priority}")
        applied = 0
        with self._locked():
            self._check_open()
            for key, priority in updates:
                item = self._items.get(key)
                if item is None:
                    continue
                item.priority = float(priority)
                self.sampler.update(key, item.priority)
                self.remover.update(key, item.priority)
                for ext in self.extensions:
                    ext.on_update(item)
                applied += 1
        return applied

    def delete(self, key: int) -> None:
        with self._locked():
            self._check_open()
            if key not in self._items:
                raise NotFoundError(f"item {key} not in table {self.name!r}")
            self._delete_locked(key)

    def _delete_locked(self, key: int) -> None:
        item = self._items.pop(key)
        self.sampler.delete(key)
        self.remover.delete(key)
        self.rate_limiter.record_delete()
        for ext in self.extensions:
            ext.on_delete(item)
        self.store.release(item.chunks)

    def size(self) -> int:
        with self._locked():
            return len(self._items)

    def __len__(self) -> int:
        return self.size()

    def keys(self) -> list[int]:
        with self._locked():
            return list(self._items)

    def get(self, key: int) -> Item:
        with self._locked():
            try:
                return self._items[key]
            except KeyError:
                raise NotFoundError(f"item {key} not in table {self.name!r}") from None

    def info(self) -> dict[str, Any]:
        with self._locked():
            return self._info_locked()

    def _info_locked(self) -> dict[str, Any]:
        info = {
            "name": self.name,
            "config": self.config.to_dict(),
            "size": len(self._items),
            "rate_limiter": self.rate_limiter.counters(),
        }
        for ext in self.extensions:
            if isinstance(ext, StatsExtension):
                info["stats"] = ext.snapshot()
        return info

    def audit(self) -> list[str]:
        """Return a list of inconsistencies; empty means the table is healthy."""
        with self._locked():
            return self._audit_locked()

    def _audit_locked(self) -> list[str]:
        problems = []
        keys = set(self._items)
        for role, sel in (("sampler", self.sampler), ("remover", self.remover)):
            sel_keys = sel.keys()
            if sel_keys != keys or len(sel) != len(keys):
                problems.append(
                    f"{role} keys differ from table keys: missing {sorted(keys - sel_keys)[:5]}, "
                    f"extra {sorted(sel_keys - keys)[:5]}")
        if len(keys) > self.config.max_size:
            problems.append(f"size {len(keys)} exceeds max_size {self.config.max_size}")
        limiter = self.rate_limiter
        expected = limiter.config.samples_per_insert * limiter.inserts - limiter.samples
        if limiter.diff != expected:
            problems.append(f"limiter diff {limiter.diff} != recomputed {expected}")
        for item in self._items.values():
            for chunk in item.chunks:
                if self.store.refcount(chunk.key) < 1:
                    problems.append(f"item {item.key} references unowned chunk {chunk.key}")
            try:
                item.validate()
            except InvalidArgumentError as e:
                problems.append(f"item {item.key}: {e}")
            max_times = self.config.max_times_sampled
            if max_times and item.times_sampled >= max_times:
                problems.append(f"item {item.key} sampled {item.times_sampled} times but still live")
        return problems

    def chunk_references(self) -> dict[int, int]:
        with self._locked():
            counts: dict[int, int] = {}
            for item in self._items.values():
                for chunk in item.chunks:
                    counts[chunk.key] = counts.get(chunk.key, 0) + 1
            return counts

    # checkpoint support; callers hold the lock via acquire()

    def snapshot_locked(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "items": list(self._items.values()),
            "limiter": (self.rate_limiter.inserts, self.rate_limiter.samples,
                        self.rate_limiter.deletes),
            "rng": self._rng.getstate(),
            "sampler": (self.sampler.state(), self.sampler.extra_state()),
            "remover": (self.remover.state(), self.remover.extra_state()),
        }

    def restore_locked(self, items: Sequence[Item], limiter: tuple[int, int, int],
                       rng_state, sampler_state, remover_state) -> None:
        if self._items:
            raise InternalError("restore into a non-empty table")
        for item in items:
            item.validate()
            self.store.acquire(item.chunks)
            self._items[item.key] = item
        self.sampler.restore(*sampler_state)
        self.remover.restore(*remover_state)
        self.rate_limiter.restore_counters(*limiter)
        if rng_state is not None:
            self._rng.setstate(rng_state)


class _Critical:
    __slots__ = ("lock",)

    def __init__(self, lock):
        self.lock = lock

    def __enter__(self):
        self.lock.acquire()
        _local.depth = getattr(_local, "depth", 0) + 1

    def __exit__(self, *exc):
        _local.depth -= 1
        self.lock.release()
