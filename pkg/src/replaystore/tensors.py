"""Tensors, nested steps and the signatures that describe them.

A step is a nest of dicts, lists and tuples whose leaves are numpy arrays.
Flattening walks the nest depth first and yields one column per leaf. The
column path encodes the container type of every level so that a step can be
rebuilt from its flat columns and signature alone:

    {"ts": {"obs": a, "reward": r}, "action": b}  ->  ts/obs, ts/reward, action
    (a, {"x": b})                                  ->  (0), (1)/x
    [a, b]                                         ->  [0], [1]
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

from replaystore.errors import InvalidArgumentError, SignatureMismatch


class Dtype(enum.IntEnum):
    FLOAT32 = 0
    FLOAT64 = 1
    INT8 = 2
    INT16 = 3
    INT32 = 4
    INT64 = 5
    UINT8 = 6
    UINT16 = 7
    UINT32 = 8
    UINT64 = 9
    BOOL = 10

    @property
    def numpy(self) -> np.dtype:
        return _NUMPY[self]

    @property
    def width(self) -> int:
        return _NUMPY[self].itemsize

    @classmethod
    def from_numpy(cls, dtype) -> "Dtype":
        dt = np.dtype(dtype).newbyteorder("=")
        try:
            return _FROM_NUMPY[dt.str.lstrip("<>=|")]
        except KeyError:
            raise InvalidArgumentError(f"unsupported dtype {dtype!r}") from None


_NUMPY = {
    Dtype.FLOAT32: np.dtype("<f4"),
    Dtype.FLOAT64: np.dtype("<f8"),
    Dtype.INT8: np.dtype("i1"),
    Dtype.INT16: np.dtype("<i2"),
    Dtype.INT32: np.dtype("<i4"),
    Dtype.INT64: np.dtype("<i8"),
    Dtype.UINT8: np.dtype("u1"),
    Dtype.UINT16: np.dtype("<u2"),
    Dtype.UINT32: np.dtype("<u4"),
    Dtype.UINT64: np.dtype("<u8"),
    Dtype.BOOL: np.dtype("?"),
}
_FROM_NUMPY = {dt.str.lstrip("<>=|"): code for code, dt in _NUMPY.items()}


@dataclass(frozen=True)
class ColumnSpec:
    path: str
    dtype: Dtype
    shape: tuple[int, ...]

    @property
    def row_nbytes(self) -> int:
        return self.dtype.width * int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True)
class Signature:
    """Ordered column layout shared by every step of a stream."""

    columns: tuple[ColumnSpec, ...]

    def __post_init__(self):
        paths = [c.path for c in self.columns]
        if len(set(paths)) != len(paths):
            raise InvalidArgumentError(f"duplicate column paths in {paths}")

    def __len__(self) -> int:
        return len(self.columns)

    def __iter__(self):
        return iter(self.columns)

    @property
    def paths(self) -> list[str]:
        return [c.path for c in self.columns]

    @property
    def row_nbytes(self) -> int:
        return sum(c.row_nbytes for c in self.columns)

    def encode(self) -> bytes:
        parts = [struct.pack("<H", len(self.columns))]
        for col in self.columns:
            path = col.path.encode("utf-8")
            parts.append(struct.pack("<H", len(path)))
            parts.append(path)
            parts.append(struct.pack("<BB", int(col.dtype), len(col.shape)))
            parts.append(struct.pack(f"<{len(col.shape)}I", *col.shape))
        return b"".join(parts)

    @classmethod
    def decode(cls, buf, offset: int = 0) -> tuple["Signature", int]:
        """Parse a signature block starting at ``offset``; returns it and the end offset."""
        view = memoryview(buf)
        (count,) = _unpack("<H", view, offset)
        offset += 2
        columns = []
        for _ in range(count):
            (n,) = _unpack("<H", view, offset)
            offset += 2
            if offset + n > len(view):
                raise InvalidArgumentError("truncated signature path")
            try:
                path = bytes(view[offset:offset + n]).decode("utf-8")
            except UnicodeDecodeError:
                raise InvalidArgumentError("signature path is not valid utf-8") from None
            offset += n
            code, rank = _unpack("<BB", view, offset)
            offset += 2
            try:
                dtype = Dtype(code)
            except ValueError:
                raise InvalidArgumentError(f"unknown dtype code {code}") from None
            shape = _unpack(f"<{rank}I", view, offset)
            offset += 4 * rank
            columns.append(ColumnSpec(path, dtype, tuple(shape)))
        return cls(tuple(columns)), offset


def _unpack(fmt: str, view, offset: int):
    size = struct.calcsize(fmt)
    if offset < 0 or offset + size > len(view):
        raise InvalidArgumentError("truncated signature block")
    return struct.unpack_from(fmt, view, offset)


def as_tensor(value) -> np.ndarray:
    """Coerce a leaf to a little-endian numpy array of a supported dtype."""
    arr = np.asarray(value)
    code = Dtype.from_numpy(arr.dtype)
    return np.asarray(arr, dtype=code.numpy, order="C")


def _walk(node, prefix: str, out: list):
    if isinstance(node, dict):
        for name, child in node.items():
            name = str(name)
            if not name or "/" in name or name[0] in "[(":
                raise InvalidArgumentError(f"invalid node name {name!r}")
            _walk(child, f"{prefix}/{name}" if prefix else name, out)
    elif isinstance(node, (list, tuple)):
        left, right = ("[", "]") if isinstance(node, list) else ("(", ")")
        for i, child in enumerate(node):
            seg = f"{left}{i}{right}"
            _walk(child, f"{prefix}/{seg}" if prefix else seg, out)
    else:
        out.append((prefix, as_tensor(node)))


def flatten(step) -> tuple[list[np.ndarray], Signature]:
    """Depth-first flatten a step into its leaf tensors and signature."""
    pairs: list[tuple[str, np.ndarray]] = []
    _walk(step, "", pairs)
    values = [v for _, v in pairs]
    sig = Signature(tuple(
        ColumnSpec(path, Dtype.from_numpy(v.dtype), tuple(v.shape)) for path, v in pairs))
    return values, sig


def unflatten(values: Sequence[Any], signature: Signature):
    """Rebuild the nest described by ``signature`` with ``values`` as leaves."""
    if len(values) != len(signature):
        raise InvalidArgumentError(
            f"expected {len(signature)} values, got {len(values)}")
    if len(signature) == 1 and signature.columns[0].path == "":
        return values[0]

    root: dict = {}
    for col, value in zip(signature.columns, values):
        node = root
        segs = col.path.split("/")
        for seg in segs[:-1]:
            node = node.setdefault(seg, {})
        node[segs[-1]] = value
    return _materialize(root)


def _materialize(node):
    if not isinstance(node, dict):
        return node
    keys = list(node)
    if keys and keys[0][0] in "[(":
        items = [_materialize(node[k]) for k in keys]
        return items if keys[0][0] == "[" else tuple(items)
    return {k: _materialize(v) for k, v in node.items()}


def signature_of(step) -> Signature:
    return flatten(step)[1]


def check_signature(step, expected: Signature) -> list[np.ndarray]:
    """Flatten ``step`` and verify it against ``expected``.

    Returns the flat values on success and raises ``SignatureMismatch`` naming
    the first offending column otherwise.
    """
    values, actual = flatten(step)
    compare_signatures(actual, expected)
    return values


def compare_signatures(actual: Signature, expected: Signature) -> None:
    for got, want in zip(actual.columns, expected.columns):
        if got.path != want.path:
            raise SignatureMismatch(
                f"column path {got.path!r} does not match expected {want.path!r}")
        if got.dtype != want.dtype or got.shape != want.shape:
            raise SignatureMismatch(
                f"column {got.path!r}: expected {want.dtype.name.lower()}{list(want.shape)}, "
                f"got {got.dtype.name.lower()}{list(got.shape)}")
    if len(actual) != len(expected):
        extra = actual.columns[len(expected):] or expected.columns[len(actual):]
        raise SignatureMismatch(
            f"column count {len(actual)} != expected {len(expected)} "
            f"(first unmatched column {extra[0].path!r})")


def stack_rows(rows: Iterable[Sequence[np.ndarray]], signature: Signature) -> list[np.ndarray]:
    """Turn a list of flat steps into one batched array per column."""
    rows = list(rows)
    return [np.stack([r[i] for r in rows]) if rows else
            np.empty((0, *c.shape), c.dtype.numpy)
            for i, c in enumerate(signature.columns)]
