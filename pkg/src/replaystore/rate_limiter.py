"""Admission control for table inserts and samples.

The limiter keeps a cursor ``diff = samples_per_insert * inserts - samples``.
Each insert moves it up by ``samples_per_insert`` and each sample moves it
down by one. An insert is admitted only if the cursor stays at or below
``max_diff`` afterwards, a sample only if the table holds at least
``min_size_to_sample`` items and the cursor stays at or above ``min_diff``.
"""

from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass

from replaystore.errors import InvalidArgumentError

DBL_MAX = sys.float_info.max


@dataclass(frozen=True)
class RateLimiterConfig:
    min_size_to_sample: int
    samples_per_insert: float
    min_diff: float
    max_diff: float

    def __post_init__(self):
        if self.min_size_to_sample < 0:
            raise InvalidArgumentError("min_size_to_sample must be >= 0")
        if not self.samples_per_insert > 0:
            raise InvalidArgumentError("samples_per_insert must be > 0")
        if not self.min_diff <= self.max_diff:
            raise InvalidArgumentError("min_diff must be <= max_diff")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RateLimiterConfig":
        kind = d.get("type")
        if kind == "min_size":
            return make_min_size(d["min_size"])
        if kind == "queue":
            return make_queue(d["queue_size"])
        if kind == "sample_to_insert_ratio":
            return make_sample_to_insert_ratio(
                d["min_size"], d["samples_per_insert"], d["error_buffer"])
        return cls(int(d["min_size_to_sample"]), float(d["samples_per_insert"]),
                   float(d["min_diff"]), float(d["max_diff"]))


def make_sample_to_insert_ratio(min_size: int, samples_per_insert: float,
                                error_buffer: float) -> RateLimiterConfig:
    """Keep the samples-per-insert ratio near a target.

    The cursor is confined to ``error_buffer`` on either side of the value it
    reaches once ``min_size`` items have been inserted without sampling, so
    filling the table up to ``min_size`` never deadlocks against the bound.
    The window must fit one insert step plus one sample step, otherwise the
    cursor can land where neither is admissible.
    """
    if not samples_per_insert > 0:
        raise InvalidArgumentError("samples_per_insert must be > 0")
    if not error_buffer > 0:
        raise InvalidArgumentError("error_buffer must be > 0")
    if min_size < 0:
        raise InvalidArgumentError("min_size must be >= 0")
    if 2 * error_buffer < samples_per_insert + 1:
        raise InvalidArgumentError(
            f"error_buffer {error_buffer} too small: 2 * error_buffer must be >= "
            f"samples_per_insert + 1 = {samples_per_insert + 1}")
    offset = samples_per_insert * min_size
    return RateLimiterConfig(int(min_size), float(samples_per_insert),
                             offset - error_buffer, offset + error_buffer)


def make_min_size(min_size: int) -> RateLimiterConfig:
    """Gate sampling on table size only; the ratio is unbounded."""
    if min_size < 0:
        raise InvalidArgumentError("min_size must be >= 0")
    return RateLimiterConfig(int(min_size), 1.0, -DBL_MAX, DBL_MAX)


def make_queue(queue_size: int) -> RateLimiterConfig:
    """Allow inserts until ``queue_size`` items are unconsumed, samples while any are."""
    if queue_size < 1:
        raise InvalidArgumentError("queue_size must be >= 1")
    return RateLimiterConfig(0, 1.0, 0.0, float(queue_size))


class RateLimiter:
    """Counters plus admission predicates. Not synchronized: the owning table's lock guards it."""

    def __init__(self, config: RateLimiterConfig):
        self.config = config
        self.inserts = 0
        self.samples = 0
        self.deletes = 0
        self._min_size = config.min_size_to_sample
        self._spi = config.samples_per_insert
        self._min_diff = config.min_diff
        self._max_diff = config.max_diff

    @property
    def diff(self) -> float:
        return self._spi * self.inserts - self.samples

    @property
    def samples_per_insert(self) -> float:
        return self.samples / self.inserts if self.inserts else math.nan

    # both predicates evaluate the cursor exactly as it will read after the
    # operation, so rounding can never admit a step that lands out of bounds
    def can_insert(self, table_size: int = 0) -> bool:
        return self._spi * (self.inserts + 1) - self.samples <= self._max_diff

    def can_sample(self, table_size: int) -> bool:
        return (table_size >= self._min_size
                and self._spi * self.inserts - (self.samples + 1) >= self._min_diff)

    def record_insert(self) -> None:
        self.inserts += 1

    def record_sample(self) -> None:
        self.samples += 1

    def record_delete(self) -> None:
        self.deletes += 1

    def counters(self) -> dict:
        return {"inserts": self.inserts, "samples": self.samples,
                "deletes": self.deletes, "diff": self.diff}

    def restore_counters(self, inserts: int, samples: int, deletes: int) -> None:
        self.inserts, self.samples, self.deletes = inserts, samples, deletes
