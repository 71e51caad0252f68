"""Token weight tables: IDF weights, sum-to-one normalization, unseen-token backfill."""

from __future__ import annotations

import enum
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .store import Vocab

NORMALIZED_TOL = 1e-9


class WeightError(ValueError):
    pass


class Provenance(str, enum.Enum):
    UNIFORM = "uniform"
    IDF = "idf"
    LEARNED = "learned"
    BACKFILLED = "backfilled"


class SpecialPolicy(str, enum.Enum):
    ZERO = "zero"
    ONE = "one"


@dataclass(frozen=True, eq=False)
class WeightTable:
    w: np.ndarray
    provenance: Provenance = Provenance.UNIFORM
    special_policy: SpecialPolicy = SpecialPolicy.ONE

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        if w.ndim != 1:
            raise WeightError("weights must be a 1-d array")
        if not np.isfinite(w).all():
            raise WeightError("weights must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        object.__setattr__(self, "special_policy", SpecialPolicy(self.special_policy))

    @classmethod
    def uniform(cls, size: int, value: float = 1.0) -> "WeightTable":
        return cls(np.full(size, value), Provenance.UNIFORM)

    def __len__(self) -> int:
        return len(self.w)

    def __eq__(self, other):
        if not isinstance(other, WeightTable):
            return NotImplemented
        return (
            self.provenance == other.provenance
            and self.special_policy == other.special_policy
            and np.array_equal(self.w, other.w)
        )

    __hash__ = None


@dataclass(frozen=True)
class DocFreq:
    n_docs: int
    counts: np.ndarray = field(compare=False)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.min(initial=0) < 0 or counts.max(initial=0) > self.n_docs:
            raise WeightError("document frequencies must lie in [0, N]")
        object.__setattr__(self, "counts", counts)


def count_doc_freq(
    corpus: Mapping[str, Iterable[int]] | Iterable[Iterable[int]],
    vocab_size: int,
    sample_fraction: float = 1.0,
    seed: int = 0,
) -> DocFreq:
    """Count how many (optionally sub-sampled) documents contain each token.

    With ``sample_fraction < 1`` a fixed-size random subset of
    ``max(1, round(fraction * N))`` documents is drawn with ``seed``.
    """
    docs = list(corpus.values() if isinstance(corpus, Mapping) else corpus)
    if not docs:
        raise WeightError("empty corpus")
    if not 0.0 < sample_fraction <= 1.0:
        raise WeightError("sample_fraction must be in (0, 1]")
    if sample_fraction < 1.0:
        rng = np.random.default_rng(seed)
        size = max(1, round(sample_fraction * len(docs)))
        picked = np.sort(rng.choice(len(docs), size=size, replace=False))
        docs = [docs[i] for i in picked]
    counts = np.zeros(vocab_size, dtype=np.int64)
    for i, doc in enumerate(docs):
        ids = np.unique(np.asarray(list(doc), dtype=np.int64))
        if ids.size and (ids[0] < 0 or ids[-1] >= vocab_size):
            raise WeightError(f"token id out of range [0, {vocab_size}) in document #{i}")
        counts[ids] += 1
    return DocFreq(len(docs), counts)


def idf(n_docs: int, df: np.ndarray | int) -> np.ndarray | float:
    """ln((N - n + 0.5) / (n + 0.5) + 1)."""
    df = np.asarray(df, dtype=np.float64)
    out = np.log((n_docs - df + 0.5) / (df + 0.5) + 1.0)
    return float(out) if out.ndim == 0 else out


def normalize_sum(table: WeightTable) -> WeightTable:
    """Rescale so the weights sum to one.

    Tables already summing to one within ``NORMALIZED_TOL`` are returned
    as-is, which makes the operation idempotent bit-for-bit.
    """
    total = math.fsum(table.w)
    if not math.isfinite(total) or total == 0.0:
        raise WeightError(f"cannot normalize weights with sum {total}")
    if abs(total - 1.0) <= NORMALIZED_TOL:
        return table
    return replace(table, w=table.w / total)


def compute_idf(
    df: DocFreq,
    vocab: Vocab | int,
    special_policy: SpecialPolicy | str = SpecialPolicy.ONE,
    normalize: bool = True,
) -> WeightTable:
    """Zero-shot IDF weights.

    Tokens absent from the corpus get 0; special tokens get 0 or 1 per the
    policy (assigned before normalization).
    """
    if isinstance(vocab, int):
        vocab = Vocab(vocab)
    if df.n_docs == 0:
        raise WeightError("corpus size N is 0")
    if len(df.counts) != vocab.size:
        raise WeightError(f"doc-freq table covers {len(df.counts)} tokens, vocab has {vocab.size}")
    policy = SpecialPolicy(special_policy)
    w = np.where(df.counts > 0, idf(df.n_docs, df.counts), 0.0)
    if vocab.special_ids:
        w[sorted(vocab.special_ids)] = 1.0 if policy is SpecialPolicy.ONE else 0.0
    table = WeightTable(w, Provenance.IDF, policy)
    return normalize_sum(table) if normalize else table


def backfill_unseen(learned: WeightTable, idf_table: WeightTable, seen: Iterable[int]) -> WeightTable:
    """Keep IDF weights for unseen tokens; rescale learned weights on seen ones.

    Seen tokens end up carrying exactly the IDF mass they had, distributed in
    proportion to the learned weights.
    """
    if len(learned) != len(idf_table):
        raise WeightError("learned and IDF tables differ in vocabulary size")
    seen_ids = np.array(sorted({int(t) for t in seen}), dtype=np.int64)
    out = idf_table.w.copy()
    if seen_ids.size:
        learned_mass = math.fsum(learned.w[seen_ids])
        if not learned_mass > 0.0:
            # a non-positive scale would zero out or reverse the learned order
            raise WeightError(f"learned weights over the seen tokens sum to {learned_mass}, need > 0")
        idf_mass = math.fsum(idf_table.w[seen_ids])
        out[seen_ids] = learned.w[seen_ids] * (idf_mass / learned_mass)
    return WeightTable(out, Provenance.BACKFILLED, idf_table.special_policy)


# ---------------------------------------------------------------------------
# text format: "# key=value" headers then "token_id<TAB>weight" for nonzero entries


def format_weights(table: WeightTable) -> str:
    lines = [
        f"# vocab_size={len(table)}\n",
        f"# provenance={table.provenance.value}\n",
        f"# special_policy={table.special_policy.value}\n",
    ]
    for t in np.flatnonzero(table.w):
        lines.append(f"{t}\t{table.w[t]:.17g}\n")
    return "".join(lines)


def save_weights(table: WeightTable, path: str | Path) -> None:
    atomic_write(path, format_weights(table))


def load_weights(path: str | Path) -> WeightTable:
    header: dict[str, str] = {}
    entries: dict[int, float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].strip().partition("=")
                if sep:
                    header[key.strip()] = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise WeightError(f"{path}:{lineno}: expected token_id<TAB>weight")
            try:
                tok, val = int(parts[0]), float(parts[1])
            except ValueError:
                raise WeightError(f"{path}:{lineno}: cannot parse {line!r}") from None
            if tok in entries:
                raise WeightError(f"{path}:{lineno}: duplicate token {tok}")
            entries[tok] = val
    if "vocab_size" not in header:
        raise WeightError(f"{path}: missing '# vocab_size=' header")
    try:
        size = int(header["vocab_size"])
        provenance = Provenance(header.get("provenance", "uniform"))
        policy = SpecialPolicy(header.get("special_policy", "one"))
    except ValueError as exc:
        raise WeightError(f"{path}: bad header: {exc}") from None
    w = np.zeros(size)
    for tok, val in entries.items():
        if not 0 <= tok < size:
            raise WeightError(f"{path}: token {tok} outside vocab of size {size}")
        w[tok] = val
    return WeightTable(w, provenance, policy)
