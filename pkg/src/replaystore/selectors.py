"""Item selection strategies, used by a table both to sample and to evict.

Selectors see only keys, priorities and the order of operations, never item
contents. Every selector supports insert/update/delete in O(log n) or better
and picks a key from a uniform draw in [0, 1) supplied by the owning table.
"""

from __future__ import annotations

import heapq
import itertools
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, NamedTuple

from replaystore.errors import InternalError, InvalidArgumentError, NotFoundError


class Selection(NamedTuple):
    key: int
    probability: float


@dataclass(frozen=True)
class SelectorEvent:
    kind: str  # "inserted" | "updated" | "deleted"
    key: int
    priority: float = 0.0


class EmptySelectorError(NotFoundError):
    pass


def _check_priority(priority: float) -> float:
    priority = float(priority)
    if not math.isfinite(priority) or priority < 0:
        raise InvalidArgumentError(f"priority must be finite and >= 0, got {priority}")
    return priority


class Selector:
    kind = ""

    def insert(self, key: int, priority: float) -> None:
        raise NotImplementedError

    def update(self, key: int, priority: float) -> None:
        raise NotImplementedError

    def delete(self, key: int) -> None:
        raise NotImplementedError

    def select(self, draw: float) -> Selection:
        raise NotImplementedError

    def keys(self) -> set[int]:
        raise NotImplementedError

    def __len__(self) -> int:
        raise NotImplementedError

    def observe(self, event: SelectorEvent) -> None:
        if event.kind == "inserted":
            self.insert(event.key, event.priority)
        elif event.kind == "updated":
            self.update(event.key, event.priority)
        elif event.kind == "deleted":
            self.delete(event.key)
        else:
            raise InvalidArgumentError(f"unknown selector event {event.kind!r}")

    def config(self) -> dict[str, Any]:
        return {"type": self.kind}

    def state(self) -> list[tuple[int, float]]:
        """Entries in the order that rebuilds an identical selector via ``insert``."""
        raise NotImplementedError

    def extra_state(self) -> dict[str, Any]:
        return {}

    def restore(self, entries, extra: dict[str, Any] | None = None) -> None:
        for key, priority in entries:
            self.insert(key, priority)


class _Ordered(Selector):
    def __init__(self):
        self._entries: OrderedDict[int, float] = OrderedDict()

    def insert(self, key, priority):
        if key in self._entries:
            raise InternalError(f"{self.kind}: duplicate insert of key {key}")
        self._entries[key] = _check_priority(priority)

    def update(self, key, priority):
        if key not in self._entries:
            raise InternalError(f"{self.kind}: update of unknown key {key}")
        self._entries[key] = _check_priority(priority)

    def delete(self, key):
        try:
            del self._entries[key]
        except KeyError:
            raise InternalError(f"{self.kind}: delete of unknown key {key}") from None

    def keys(self):
        return set(self._entries)

    def __len__(self):
        return len(self._entries)

    def state(self):
        return list(self._entries.items())


class Fifo(_Ordered):
    kind = "fifo"

    def select(self, draw):
        if not self._entries:
            raise EmptySelectorError("select from empty selector")
        return Selection(next(iter(self._entries)), 1.0)


class Lifo(_Ordered):
    kind = "lifo"

    def select(self, draw):
        if not self._entries:
            raise EmptySelectorError("select from empty selector")
        return Selection(next(reversed(self._entries)), 1.0)


class Uniform(Selector):
    kind = "uniform"

    def __init__(self):
        self._keys: list[int] = []
        self._index: dict[int, int] = {}
        self._priorities: dict[int, float] = {}

    def insert(self, key, priority):
        if key in self._index:
            raise InternalError(f"uniform: duplicate insert of key {key}")
        self._priorities[key] = _check_priority(priority)
        self._index[key] = len(self._keys)
        self._keys.append(key)

    def update(self, key, priority):
        if key not in self._index:
            raise InternalError(f"uniform: update of unknown key {key}")
        self._priorities[key] = _check_priority(priority)

    def delete(self, key):
        try:
            i = self._index.pop(key)
        except KeyError:
            raise InternalError(f"uniform: delete of unknown key {key}") from None
        del self._priorities[key]
        last = self._keys.pop()
        if last != key:
            self._keys[i] = last
            self._index[last] = i

    def select(self, draw):
        n = len(self._keys)
        if n == 0:
            raise EmptySelectorError("select from empty selector")
        return Selection(self._keys[min(int(draw * n), n - 1)], 1.0 / n)

    def keys(self):
        return set(self._keys)

    def __len__(self):
        return len(self._keys)

    def state(self):
        return [(k, self._priorities[k]) for k in self._keys]


class _Heap(Selector):
    """Binary heap with lazy deletion; ties go to the earliest inserted key."""

    sign = 1.0

    def __init__(self):
        self._heap: list[tuple[float, int, int, int]] = []
        # key -> (priority, insertion seq, version)
        self._live: dict[int, tuple[float, int, int]] = {}
        self._seq = itertools.count()
        self._version = itertools.count()

    def _push(self, key, priority, seq):
        version = next(self._version)
        self._live[key] = (priority, seq, version)
        heapq.heappush(self._heap, (self.sign * priority, seq, version, key))
        if len(self._heap) > 2 * len(self._live) + 64:
            self._heap = [(self.sign * p, s, v, k) for k, (p, s, v) in self._live.items()]
            heapq.heapify(self._heap)

    def insert(self, key, priority):
        if key in self._live:
            raise InternalError(f"{self.kind}: duplicate insert of key {key}")
        self._push(key, _check_priority(priority), next(self._seq))

    def update(self, key, priority):
        try:
            _, seq, _ = self._live[key]
        except KeyError:
            raise InternalError(f"{self.kind}: update of unknown key {key}") from None
        self._push(key, _check_priority(priority), seq)

    def delete(self, key):
        try:
            del self._live[key]
        except KeyError:
            raise InternalError(f"{self.kind}: delete of unknown key {key}") from None

    def select(self, draw):
        heap, live = self._heap, self._live
        while heap:
            _, _, version, key = heap[0]
            entry = live.get(key)
            if entry is not None and entry[2] == version:
                return Selection(key, 1.0)
            heapq.heappop(heap)
        raise EmptySelectorError("select from empty selector")

    def keys(self):
        return set(self._live)

    def __len__(self):
        return len(self._live)

    def state(self):
        ordered = sorted(self._live.items(), key=lambda kv: kv[1][1])
        return [(k, p) for k, (p, _, _) in ordered]


class MaxHeap(_Heap):
    kind = "max_heap"
    sign = -1.0


class MinHeap(_Heap):
    kind = "min_heap"
    sign = 1.0


class Prioritized(Selector):
    """Samples key i with probability p_i**exponent / sum_k p_k**exponent.

    Backed by a sum tree laid out as an implicit binary tree over a power-of-two
    number of leaves. Leaves are kept dense: deleting a key moves the last leaf
    into the freed slot. Zero-priority keys are never chosen while some key has
    a positive priority; if all priorities are zero the choice is uniform.
    """

    kind = "prioritized"

    def __init__(self, exponent: float = 1.0, capacity: int = 16):
        exponent = float(exponent)
        if not math.isfinite(exponent) or exponent < 0:
            raise InvalidArgumentError(f"exponent must be finite and >= 0, got {exponent}")
        self.exponent = exponent
        self._capacity = 1
        while self._capacity < capacity:
            self._capacity *= 2
        self._tree = [0.0] * (2 * self._capacity)
        self._keys: list[int] = []
        self._slot: dict[int, int] = {}
        self._priorities: dict[int, float] = {}

    def config(self):
        return {"type": self.kind, "exponent": self.exponent}

    def weight(self, priority: float) -> float:
        return 0.0 if priority == 0 else priority ** self.exponent

    @property
    def total(self) -> float:
        return self._tree[1]

    def _set(self, slot: int, value: float) -> None:
        tree = self._tree
        i = slot + self._capacity
        tree[i] = value
        i >>= 1
        while i:
            # recompute instead of adding deltas so rounding never accumulates
            tree[i] = tree[2 * i] + tree[2 * i + 1]
            i >>= 1

    def _grow(self) -> None:
        leaves = self._tree[self._capacity:self._capacity + len(self._keys)]
        self._capacity *= 2
        self._tree = [0.0] * (2 * self._capacity)
        self._tree[self._capacity:self._capacity + len(leaves)] = leaves
        for i in range(self._capacity - 1, 0, -1):
            self._tree[i] = self._tree[2 * i] + self._tree[2 * i + 1]

    def insert(self, key, priority):
        if key in self._slot:
            raise InternalError(f"prioritized: duplicate insert of key {key}")
        priority = _check_priority(priority)
        if len(self._keys) == self._capacity:
            self._grow()
        slot = len(self._keys)
        self._keys.append(key)
        self._slot[key] = slot
        self._priorities[key] = priority
        self._set(slot, self.weight(priority))

    def update(self, key, priority):
        try:
            slot = self._slot[key]
        except KeyError:
            raise InternalError(f"prioritized: update of unknown key {key}") from None
        priority = _check_priority(priority)
        self._priorities[key] = priority
        self._set(slot, self.weight(priority))

    def delete(self, key):
        try:
            slot = self._slot.pop(key)
        except KeyError:
            raise InternalError(f"prioritized: delete of unknown key {key}") from None
        del self._priorities[key]
        last_slot = len(self._keys) - 1
        last = self._keys.pop()
        if slot != last_slot:
            self._keys[slot] = last
            self._slot[last] = slot
            self._set(slot, self._tree[last_slot + self._capacity])
        self._set(last_slot, 0.0)

    def probability(self, key: int) -> float:
        total = self.total
        if total > 0:
            return self._tree[self._slot[key] + self._capacity] / total
        return 1.0 / len(self._keys)

    def select(self, draw):
        n = len(self._keys)
        if n == 0:
            raise EmptySelectorError("select from empty selector")
        tree = self._tree
        total = tree[1]
        if total <= 0:
            return Selection(self._keys[min(int(draw * n), n - 1)], 1.0 / n)
        target = draw * total
        i = 1
        while i < self._capacity:
            left = tree[2 * i]
            if target < left or tree[2 * i + 1] <= 0:
                i = 2 * i
            else:
                target -= left
                i = 2 * i + 1
        slot = i - self._capacity
        if slot >= n or tree[i] <= 0:
            # rounding pushed the descent onto an empty leaf; take the last positive one
            slot = max(s for s in range(n) if tree[s + self._capacity] > 0)
            i = slot + self._capacity
        return Selection(self._keys[slot], tree[i] / total)

    def keys(self):
        return set(self._keys)

    def __len__(self):
        return len(self._keys)

    def state(self):
        return [(k, self._priorities[k]) for k in self._keys]

    def extra_state(self):
        return {"capacity": self._capacity}

    def restore(self, entries, extra=None):
        capacity = (extra or {}).get("capacity", self._capacity)
        while self._capacity < capacity:
            self._grow()
        super().restore(entries)


SELECTORS = {cls.kind: cls for cls in (Fifo, Lifo, Uniform, MaxHeap, MinHeap, Prioritized)}


def make(kind: str, **params) -> Selector:
    """Build a selector from its type name (``fifo``, ``lifo``, ``uniform``,
    ``max_heap``, ``min_heap``, ``prioritized``) and parameters."""
    try:
        cls = SELECTORS[kind]
    except KeyError:
        raise InvalidArgumentError(f"unknown selector type {kind!r}") from None
    return cls(**params)


def from_config(config: dict[str, Any]) -> Selector:
    params = dict(config)
    return make(params.pop("type"), **params)
