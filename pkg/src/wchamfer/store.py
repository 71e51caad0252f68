"""Token-level multi-vector embedding store.

Binary layout (little-endian)::

    magic "MVST" | version u32 (=1) | dim u32 | vocab_size u32 | record_count u64
    per record:
        item_id_len u16 | item_id utf-8 | token_count u32
        token_ids u32[token_count] | vectors f32[token_count * dim] (row-major)

Vectors are stored and used as given; rows are only checked to be unit norm
within ``NORM_TOL``, never re-normalized.
"""

from __future__ import annotations

import math
import struct
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write

MAGIC = b"MVST"
FORMAT_VERSION = 1
NORM_TOL = 1e-3

_HEADER = struct.Struct("<4sIIIQ")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


class StoreError(ValueError):
    """Base class for malformed or invalid embedding stores."""

    def __init__(self, message: str, item_id: str | None = None, offset: int | None = None):
        self.item_id = item_id
        self.offset = offset
        where = []
        if item_id is not None:
            where.append(f"item_id={item_id!r}")
        if offset is not None:
            where.append(f"offset={offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class HeaderError(StoreError):
    pass


class TruncatedError(StoreError):
    pass


class DimensionMismatchError(StoreError):
    pass


class NormToleranceError(StoreError):
    pass


class NonFiniteError(StoreError):
    pass


class DuplicateItemError(StoreError):
    pass


class TokenRangeError(StoreError):
    pass


@dataclass(frozen=True)
class Vocab:
    size: int
    special_ids: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.size < 0:
            raise ValueError("vocab size must be non-negative")
        object.__setattr__(self, "special_ids", frozenset(int(t) for t in self.special_ids))
        bad = [t for t in self.special_ids if not 0 <= t < self.size]
        if bad:
            raise ValueError(f"special ids outside [0, {self.size}): {sorted(bad)}")


@dataclass(frozen=True, eq=False)
class MultiVecRecord:
    """One query or document: its token ids and one embedding row per token."""

    item_id: str
    token_ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        ids = np.ascontiguousarray(self.token_ids, dtype=np.uint32)
        vecs = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vecs.ndim == 1:
            vecs = vecs.reshape(1, -1)
        ids.flags.writeable = False
        vecs.flags.writeable = False
        object.__setattr__(self, "token_ids", ids)
        object.__setattr__(self, "vectors", vecs)

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __eq__(self, other):
        if not isinstance(other, MultiVecRecord):
            return NotImplemented
        return (
            self.item_id == other.item_id
            and np.array_equal(self.token_ids, other.token_ids)
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class EmbeddingStore(Mapping):
    """Immutable ``item_id -> MultiVecRecord`` mapping sharing one dimension."""

    dim: int
    vocab: Vocab
    records: Mapping[str, MultiVecRecord] = field(default_factory=dict)

    @classmethod
    def from_records(cls, dim: int, vocab: Vocab | int, records: Iterable[MultiVecRecord]) -> "EmbeddingStore":
        if isinstance(vocab, int):
            vocab = Vocab(vocab)
        table: dict[str, MultiVecRecord] = {}
        for rec in records:
            if rec.item_id in table:
                raise DuplicateItemError("duplicate item_id", item_id=rec.item_id)
            table[rec.item_id] = rec
        return cls(dim=dim, vocab=vocab, records=table)

    def __getitem__(self, item_id: str) -> MultiVecRecord:
        return self.records[item_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.vocab.size == other.vocab.size
            and list(self.records) == list(other.records)
            and all(self.records[k] == other.records[k] for k in self.records)
        )

    __hash__ = None

    def with_special_ids(self, special_ids: Iterable[int]) -> "EmbeddingStore":
        return EmbeddingStore(self.dim, Vocab(self.vocab.size, frozenset(special_ids)), self.records)

    def tokenized(self) -> dict[str, np.ndarray]:
        return {k: rec.token_ids for k, rec in self.records.items()}


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    item_id: str | None
    kind: str
    detail: str


def _record_violations(rec: MultiVecRecord, dim: int, vocab_size: int) -> list[Violation]:
    out = []
    n_tok = len(rec.token_ids)
    if n_tok == 0:
        out.append(Violation(rec.item_id, "empty record", "token_count must be >= 1"))
    if rec.vectors.shape[0] != n_tok:
        out.append(
            Violation(rec.item_id, "length mismatch", f"{n_tok} token ids vs {rec.vectors.shape[0]} vector rows")
        )
    if rec.vectors.shape[1] != dim:
        out.append(Violation(rec.item_id, "dimension mismatch", f"expected {dim}, got {rec.vectors.shape[1]}"))
    if n_tok and int(rec.token_ids.max()) >= vocab_size:
        out.append(
            Violation(rec.item_id, "token id out of range", f"max id {int(rec.token_ids.max())} >= {vocab_size}")
        )
    vecs = rec.vectors.astype(np.float64)
    finite = np.isfinite(vecs).all(axis=1)
    for row in np.flatnonzero(~finite):
        out.append(Violation(rec.item_id, "non-finite value", f"row {row}"))
    norms = np.linalg.norm(vecs[finite], axis=1)
    for row, nrm in zip(np.flatnonzero(finite), norms):
        if abs(nrm - 1.0) > NORM_TOL:
            out.append(Violation(rec.item_id, "norm out of tolerance", f"row {row} has norm {nrm:.6g}"))
    return out


def validate_store(store: EmbeddingStore) -> list[Violation]:
    """List every violated invariant; an empty list means the store is valid."""
    report = []
    seen = set()
    for key, rec in store.records.items():
        if key != rec.item_id:
            report.append(Violation(key, "key mismatch", f"mapped under {key!r} but item_id is {rec.item_id!r}"))
        if rec.item_id in seen:
            report.append(Violation(rec.item_id, "duplicate item_id", ""))
        seen.add(rec.item_id)
        report.extend(_record_violations(rec, store.dim, store.vocab.size))
    return report


# ---------------------------------------------------------------------------
# binary I/O


def _encode(store: EmbeddingStore) -> bytes:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, store.dim, store.vocab.size, len(store.records))]
    for rec in store.records.values():
        raw_id = rec.item_id.encode("utf-8")
        if len(raw_id) > 0xFFFF:
            raise StoreError("item_id longer than 65535 bytes", item_id=rec.item_id)
        parts.append(_U16.pack(len(raw_id)))
        parts.append(raw_id)
        parts.append(_U32.pack(len(rec.token_ids)))
        parts.append(rec.token_ids.astype("<u4").tobytes())
        parts.append(rec.vectors.astype("<f4").tobytes())
    return b"".join(parts)


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    problems = validate_store(store)
    if problems:
        p = problems[0]
        raise StoreError(f"refusing to save invalid store: {p.kind} {p.detail}".strip(), item_id=p.item_id)
    atomic_write(path, _encode(store))


def load_store(path: str | Path) -> EmbeddingStore:
    """Read and fully validate a store file. Raises a ``StoreError`` subclass on bad input."""
    buf = Path(path).read_bytes()
    return decode_store(buf)


def decode_store(buf: bytes) -> EmbeddingStore:
    if len(buf) < _HEADER.size:
        raise HeaderError("file shorter than header", offset=0)
    magic, version, dim, vocab_size, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise HeaderError(f"bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise HeaderError(f"unsupported format version {version}", offset=4)
    if dim == 0:
        raise HeaderError("dimension must be positive", offset=8)

    vocab = Vocab(vocab_size)
    records: dict[str, MultiVecRecord] = {}
    pos = _HEADER.size

    def need(n: int, what: str, item_id: str | None):
        if pos + n > len(buf):
            raise TruncatedError(f"truncated while reading {what}", item_id=item_id, offset=pos)

    for _ in range(count):
        start = pos
        need(2, "item_id length", None)
        (id_len,) = _U16.unpack_from(buf, pos)
        pos += 2
        need(id_len, "item_id", None)
        try:
            item_id = buf[pos : pos + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise StoreError(f"item_id is not valid utf-8: {exc}", offset=pos) from None
        pos += id_len
        need(4, "token count", item_id)
        (n_tok,) = _U32.unpack_from(buf, pos)
        pos += 4
        if n_tok == 0:
            raise StoreError("record has no tokens", item_id=item_id, offset=start)
        need(4 * n_tok, "token ids", item_id)
        ids = np.frombuffer(buf, dtype="<u4", count=n_tok, offset=pos).astype(np.uint32)
        pos += 4 * n_tok
        n_float = n_tok * dim
        if pos + 4 * n_float > len(buf):
            avail = (len(buf) - pos) // 4
            raise DimensionMismatchError(
                f"vector payload needs {n_float} floats for dim {dim}, only {avail} remain",
                item_id=item_id,
                offset=pos,
            )
        vecs = np.frombuffer(buf, dtype="<f4", count=n_float, offset=pos).reshape(n_tok, dim)
        vec_offset = pos
        pos += 4 * n_float

        if item_id in records:
            raise DuplicateItemError("duplicate item_id", item_id=item_id, offset=start)
        if int(ids.max()) >= vocab_size:
            raise TokenRangeError(f"token id {int(ids.max())} >= vocab size {vocab_size}", item_id=item_id, offset=start)
        vecs64 = vecs.astype(np.float64)
        if not np.isfinite(vecs64).all():
            row = int(np.flatnonzero(~np.isfinite(vecs64).all(axis=1))[0])
            raise NonFiniteError("non-finite value", item_id=item_id, offset=vec_offset + 4 * dim * row)
        norms = np.linalg.norm(vecs64, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if bad.size:
            row = int(bad[0])
            raise NormToleranceError(
                f"norm out of tolerance: row {row} has norm {norms[row]:.6g}",
                item_id=item_id,
                offset=vec_offset + 4 * dim * row,
            )
        records[item_id] = MultiVecRecord(item_id, ids, vecs)

    if pos != len(buf):
        raise StoreError(f"{len(buf) - pos} trailing bytes after last record", offset=pos)
    return EmbeddingStore(dim=dim, vocab=vocab, records=records)


# ---------------------------------------------------------------------------
# tokenized-text sidecar: "item_id<TAB>space separated token ids"


def read_tokenized(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            item_id, sep, rest = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected item_id<TAB>token ids")
            if item_id in out:
                raise ValueError(f"{path}:{lineno}: duplicate item_id {item_id!r}")
            try:
                out[item_id] = np.array([int(t) for t in rest.split()], dtype=np.int64)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-integer token id") from None
    return out


def write_tokenized(corpus: Mapping[str, Iterable[int]], path: str | Path) -> None:
    lines = [f"{k}\t{' '.join(str(int(t)) for t in v)}\n" for k, v in corpus.items()]
    atomic_write(path, "".join(lines))


def unit_rows(x: np.ndarray) -> np.ndarray:
    """Normalize rows to unit L2 norm (float64 in, float32 out)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0) or not math.isfinite(float(norms.sum())):
        raise ValueError("cannot normalize zero or non-finite rows")
    return (x / norms).astype(np.float32)
