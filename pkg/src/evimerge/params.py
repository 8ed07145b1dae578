"""Parameter archives, task vectors and the task-vector merge.

Binary layout of an ``.evmg`` file (all integers little-endian)::

    b"EVMG"  u32 format_version  u32 entry_count  u32 metadata_count
    metadata_count x (u32 len, utf-8 key, u32 len, utf-8 value)
    entry_count x (u32 len, utf-8 name, u32 layer_index, u32 rank, rank x u64 dim)
    payloads: float64 LE, concatenated in table order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"EVMG"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed or truncated archive file."""


class LayoutError(ValueError):
    """Archives whose entry tables differ where they must agree."""


@dataclass
class ArchiveEntry:
    name: str
    layer_index: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.layer_index < 0:
            raise ValueError(f"entry {self.name!r}: negative layer index")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)


@dataclass
class ParameterArchive:
    """Named float64 tensors of one model, ordered by (layer_index, name)."""

    entries: list[ArchiveEntry]
    metadata: dict[str, str] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: (e.layer_index, e.name))
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            dup = next(n for n in names if names.count(n) > 1)
            raise ValueError(f"duplicate entry name {dup!r}")
        self._index = {e.name: i for i, e in enumerate(self.entries)}

    @classmethod
    def from_dict(cls, params: dict[str, tuple[int, np.ndarray]], metadata=None) -> "ParameterArchive":
        entries = [ArchiveEntry(name, li, v) for name, (li, v) in params.items()]
        return cls(entries, dict(metadata or {}))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[self._index[name]].values

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def layer_count(self) -> int:
        return 1 + max((e.layer_index for e in self.entries), default=-1)

    def layout(self) -> list[tuple[str, int, tuple[int, ...]]]:
        return [(e.name, e.layer_index, e.shape) for e in self.entries]

    def copy(self, metadata: dict[str, str] | None = None) -> "ParameterArchive":
        return type(self)(
            [ArchiveEntry(e.name, e.layer_index, e.values.copy()) for e in self.entries],
            dict(self.metadata if metadata is None else metadata),
            self.format_version,
        )

    def with_values(self, values: Sequence[np.ndarray], cls=None, metadata=None) -> "ParameterArchive":
        cls = cls or type(self)
        return cls(
            [ArchiveEntry(e.name, e.layer_index, v) for e, v in zip(self.entries, values)],
            dict(self.metadata if metadata is None else metadata),
            self.format_version,
        )

    def bitwise_equal(self, other: "ParameterArchive") -> bool:
        """Layout equality plus identical float bit patterns."""
        if self.layout() != other.layout():
            return False
        return all(
            np.array_equal(a.values.view(np.uint64), b.values.view(np.uint64))
            for a, b in zip(self.entries, other.entries)
        )

    def table(self) -> list[dict]:
        return [
            {"name": e.name, "layer_index": e.layer_index, "shape": list(e.shape), "count": int(e.values.size)}
            for e in self.entries
        ]


class TaskVector(ParameterArchive):
    """Parameter deltas laid out exactly like the base archive."""


@dataclass
class MergeWeights:
    """Merge coefficients: shape (K,) task-wise or (K, layer_count) layer-wise."""

    mode: str
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.mode not in ("task", "layer"):
            raise ValueError(f"unknown merge mode {self.mode!r}")
        if self.mode == "task" and self.weights.ndim != 1:
            raise ValueError("task-wise weights must be one-dimensional")
        if self.mode == "layer" and self.weights.ndim != 2:
            raise ValueError("layer-wise weights must be (K, layer_count)")

    @property
    def task_count(self) -> int:
        return self.weights.shape[0]

    @property
    def layer_count(self) -> int | None:
        return self.weights.shape[1] if self.mode == "layer" else None

    @classmethod
    def uniform(cls, k: int, mode: str = "task", layer_count: int = 1) -> "MergeWeights":
        w = np.full(k, 1.0 / k)
        return cls(mode, w if mode == "task" else np.repeat(w[:, None], layer_count, axis=1))

    @classmethod
    def one_hot(cls, k: int, index: int) -> "MergeWeights":
        w = np.zeros(k)
        w[index] = 1.0
        return cls("task", w)

    def for_layer(self, layer: int) -> np.ndarray:
        if self.mode == "task":
            return self.weights
        if not 0 <= layer < self.weights.shape[1]:
            raise IndexError(f"layer index {layer} out of range for {self.weights.shape[1]} layers")
        return self.weights[:, layer]


# ---------------------------------------------------------------------------
# serialization


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def to_bytes(archive: ParameterArchive) -> bytes:
    parts = [MAGIC, struct.pack("<III", archive.format_version, len(archive.entries), len(archive.metadata))]
    for key in sorted(archive.metadata):
        parts.append(_pack_str(key))
        parts.append(_pack_str(str(archive.metadata[key])))
    for e in archive.entries:
        parts.append(_pack_str(e.name))
        parts.append(struct.pack("<II", e.layer_index, len(e.shape)))
        parts.append(struct.pack(f"<{len(e.shape)}Q", *e.shape))
    for e in archive.entries:
        parts.append(np.ascontiguousarray(e.values, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what: str) -> str:
        n = self.u32(what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"invalid utf-8 in {what}") from None


def from_bytes(buf: bytes, cls=ParameterArchive) -> ParameterArchive:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes (expected b'EVMG')")
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    n_entries = r.u32("entry count")
    n_meta = r.u32("metadata count")
    metadata = {}
    for _ in range(n_meta):
        key = r.string("metadata key")
        metadata[key] = r.string(f"metadata value for {key!r}")
    table = []
    for i in range(n_entries):
        name = r.string(f"name of entry {i}")
        layer_index = r.u32(f"layer index of entry {name!r}")
        rank = r.u32(f"rank of entry {name!r}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"dims of entry {name!r}"))
        table.append((name, layer_index, dims))
    entries = []
    for name, layer_index, dims in table:
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        need = 8 * count
        if r.pos + need > len(buf):
            raise FormatError(
                f"entry {name!r}: declared {count} values but only {(len(buf) - r.pos) // 8} remain (truncated payload)"
            )
        values = np.frombuffer(r.take(need, f"payload of {name!r}"), dtype="<f8").astype(np.float64).reshape(dims)
        entries.append(ArchiveEntry(name, layer_index, values))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last payload")
    try:
        return cls(entries, metadata, version)
    except ValueError as err:
        raise FormatError(str(err)) from None


def save_archive(archive: ParameterArchive, path) -> None:
    Path(path).write_bytes(to_bytes(archive))


def load_archive(path, cls=ParameterArchive) -> ParameterArchive:
    return from_bytes(Path(path).read_bytes(), cls)


# ---------------------------------------------------------------------------
# task-vector arithmetic


def check_layout(base: ParameterArchive, other: ParameterArchive, what: str = "archive") -> None:
    for a, b in zip(base.layout(), other.layout()):
        if a != b:
            raise LayoutError(f"{what} layout differs at entry {a[0]!r}: {a} vs {b}")
    if len(base) != len(other):
        extra = (base.names + other.names)[min(len(base), len(other))]
        raise LayoutError(f"{what} layout differs at entry {extra!r}: entry counts {len(base)} vs {len(other)}")


def compute_task_vector(base: ParameterArchive, finetuned: ParameterArchive) -> TaskVector:
    check_layout(base, finetuned, "fine-tuned archive")
    return base.with_values(
        [f.values - b.values for b, f in zip(base.entries, finetuned.entries)],
        cls=TaskVector,
        metadata={"role": "task_vector", **{k: v for k, v in finetuned.metadata.items() if k == "task"}},
    )


def apply_task_vector(base: ParameterArchive, vector: TaskVector) -> ParameterArchive:
    check_layout(base, vector, "task vector")
    return base.with_values([b.values + t.values for b, t in zip(base.entries, vector.entries)], cls=ParameterArchive)


def canonicalize_against(base: ParameterArchive, finetuned: ParameterArchive, max_rounds: int = 8) -> ParameterArchive:
    """Return an archive equal (to rounding) to ``finetuned`` for which
    ``base + (finetuned - base)`` reproduces every value bitwise.

    Float subtraction followed by addition is not always an exact round
    trip; a few rounds of re-expressing the values as base + delta reach a
    fixed point.
    """
    check_layout(base, finetuned, "fine-tuned archive")
    out = []
    for b, f in zip(base.entries, finetuned.entries):
        v = f.values
        for _ in range(max_rounds):
            nxt = b.values + (v - b.values)
            if np.array_equal(nxt.view(np.uint64), v.view(np.uint64)):
                break
            v = nxt
        else:
            raise ArithmeticError(f"entry {f.name!r}: no exact base+delta representation found")
        out.append(v)
    return finetuned.with_values(out)


def _merged_delta(vectors: Sequence[TaskVector], entry: int, w: np.ndarray) -> np.ndarray:
    acc = w[0] * vectors[0].entries[entry].values
    for k in range(1, len(vectors)):
        acc = acc + w[k] * vectors[k].entries[entry].values
    return acc


def merge_parameters(
    base: ParameterArchive, vectors: Sequence[TaskVector], weights: MergeWeights
) -> ParameterArchive:
    """theta* = theta0 + sum_k w_k tau_k, with w_k per layer in layer-wise mode."""
    if len(vectors) == 0:
        raise ValueError("at least one task vector is required")
    if weights.task_count != len(vectors):
        raise ValueError(f"weights cover {weights.task_count} tasks but {len(vectors)} task vectors were given")
    for k, vec in enumerate(vectors):
        check_layout(base, vec, f"task vector {k}")
    if weights.mode == "layer" and weights.layer_count < base.layer_count:
        raise IndexError(f"layer-wise weights have {weights.layer_count} layers, archive needs {base.layer_count}")
    merged = []
    for i, e in enumerate(base.entries):
        w = weights.for_layer(e.layer_index)
        merged.append(e.values + _merged_delta(vectors, i, w))
    return base.with_values(merged, cls=ParameterArchive, metadata={"role": "merged"})


def stack_vectors(vectors: Iterable[TaskVector]) -> dict[str, np.ndarray]:
    """Entry name -> array of shape (K, *entry_shape)."""
    vectors = list(vectors)
    return {name: np.stack([v[name] for v in vectors]) for name in vectors[0].names}
