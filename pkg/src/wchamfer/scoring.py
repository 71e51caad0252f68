"""Chamfer and weighted Chamfer distances over token-level embeddings.

Scores are distances: lower means more relevant. Every per-token distance is
computed as ``sqrt(sum((q - d)**2))`` directly rather than through the
``|q|^2 + |d|^2 - 2 q.d`` expansion, so identical vectors give exactly 0 and
results do not depend on document token order.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .store import EmbeddingStore, MultiVecRecord

# upper bound on query tokens x dim x doc rows handled per block
_BLOCK_ELEMS = 1 << 22


class ScoringError(ValueError):
    pass


def _as_weights(weights) -> np.ndarray:
    w = getattr(weights, "w", weights)
    return np.asarray(w, dtype=np.float64)


def _sq_dists(qv: np.ndarray, dv: np.ndarray) -> np.ndarray:
    """Squared L2 distances between all rows of ``qv`` and ``dv``.

    Coordinates are accumulated in a fixed order so every pair's value is
    bit-identical no matter where the row sits in ``dv``.
    """
    out = np.empty((qv.shape[0], dv.shape[0]))
    step = max(1, _BLOCK_ELEMS // max(1, qv.shape[0] * qv.shape[1]))
    for lo in range(0, dv.shape[0], step):
        blk = dv[lo : lo + step]
        acc = np.zeros((qv.shape[0], blk.shape[0]))
        for k in range(qv.shape[1]):
            diff = qv[:, k, None] - blk[None, :, k]
            acc += diff * diff
        out[:, lo : lo + step] = acc
    return out


def _check_pair(query: MultiVecRecord, doc: MultiVecRecord) -> None:
    if query.dim != doc.dim:
        raise ScoringError(f"dimension mismatch: query {query.dim} vs doc {doc.dim}")
    if len(query) == 0:
        raise ScoringError(f"empty query {query.item_id!r}")
    if len(doc) == 0:
        raise ScoringError(f"empty document {doc.item_id!r}")


def min_dists(query: MultiVecRecord, doc: MultiVecRecord) -> np.ndarray:
    """For each query token, the L2 distance to its nearest document token."""
    _check_pair(query, doc)
    qv = query.vectors.astype(np.float64)
    dv = doc.vectors.astype(np.float64)
    return np.sqrt(_sq_dists(qv, dv).min(axis=1))


def chamfer(query: MultiVecRecord, doc: MultiVecRecord) -> float:
    d = min_dists(query, doc)
    return math.fsum(d) / len(d)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Sparse per-token-id features of a (query, doc) pair.

    ``values[i]`` is the sum of min-distances over the query positions holding
    ``token_ids[i]``, divided by the query length, so that the weighted
    Chamfer distance is the dot product of these features with the weights.
    """

    token_ids: np.ndarray
    values: np.ndarray
    query_len: int

    def as_dict(self) -> dict[int, float]:
        return {int(t): float(v) for t, v in zip(self.token_ids, self.values)}

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return (
            self.query_len == other.query_len
            and np.array_equal(self.token_ids, other.token_ids)
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None


def _feature_columns(token_ids: np.ndarray, dists: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Group per-position distances (rows) by token id for every column.

    Repeated tokens are summed in ascending value order, so the result does
    not depend on where the repeats sit in the query.
    """
    uniq, inverse, counts = np.unique(token_ids, return_inverse=True, return_counts=True)
    vals = np.empty((len(uniq), dists.shape[1]))
    single = counts == 1
    vals[inverse[single[inverse]]] = dists[single[inverse]]
    for slot in np.flatnonzero(~single):
        group = np.sort(dists[inverse == slot], axis=0)
        acc = group[0].copy()
        for row in group[1:]:
            acc += row
        vals[slot] = acc
    return uniq, vals / len(token_ids)


def features_from_min_dists(token_ids: Sequence[int], dists: Sequence[float]) -> FeatureVector:
    token_ids = np.asarray(token_ids, dtype=np.int64)
    dists = np.asarray(dists, dtype=np.float64)
    if token_ids.shape != dists.shape or token_ids.ndim != 1 or len(token_ids) == 0:
        raise ScoringError("token ids and distances must be equal-length, non-empty 1-d sequences")
    uniq, vals = _feature_columns(token_ids, dists[:, None])
    return FeatureVector(uniq, vals[:, 0], len(token_ids))


def extract_features(query: MultiVecRecord, doc: MultiVecRecord) -> FeatureVector:
    return features_from_min_dists(query.token_ids, min_dists(query, doc))


def weighted_chamfer(features: FeatureVector, weights) -> float:
    """Weighted Chamfer distance: sum over tokens of weight * feature."""
    w = _as_weights(weights)
    if features.token_ids.size and int(features.token_ids.max()) >= len(w):
        raise ScoringError(f"token id {int(features.token_ids.max())} outside weight table of size {len(w)}")
    return math.fsum(w[features.token_ids] * features.values)


def score_candidates(
    query: MultiVecRecord, docs: Sequence[MultiVecRecord], weights=None
) -> list[FeatureVector] | list[float]:
    """Features for every candidate, or weighted distances when ``weights`` is given.

    All candidate vectors are scanned as one concatenated block; each
    query-token/doc-token distance is computed exactly as in ``min_dists``.
    """
    if not docs:
        return []
    for doc in docs:
        _check_pair(query, doc)
    qv = query.vectors.astype(np.float64)
    lengths = np.array([len(d) for d in docs])
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    all_dv = np.concatenate([d.vectors for d in docs]).astype(np.float64)

    sq = _sq_dists(qv, all_dv)
    per_doc = np.sqrt(np.minimum.reduceat(sq, starts, axis=1))  # (len q, n docs)
    uniq, vals = _feature_columns(query.token_ids.astype(np.int64), per_doc)

    if weights is None:
        n = len(query)
        return [FeatureVector(uniq, vals[:, i].copy(), n) for i in range(len(docs))]
    w = _as_weights(weights)
    if int(uniq.max()) >= len(w):
        raise ScoringError(f"token id {int(uniq.max())} outside weight table of size {len(w)}")
    weighted = w[uniq, None] * vals
    return [math.fsum(col) for col in weighted.T]


@dataclass(frozen=True)
class RankedList:
    """``(item_id, score)`` pairs, ascending by distance."""

    items: tuple[tuple[str, float], ...]

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.items]


def rank_by_distance(scores: Mapping[str, float] | Iterable[tuple[str, float]]) -> RankedList:
    pairs = scores.items() if isinstance(scores, Mapping) else scores
    return RankedList(tuple(sorted(((str(k), float(v)) for k, v in pairs), key=lambda p: (p[1], p[0]))))


def rerank(query: MultiVecRecord, candidates: Sequence[str], store: EmbeddingStore, weights) -> RankedList:
    """Score every candidate with the weighted Chamfer distance and sort ascending.

    Ties are broken by item_id.
    """
    missing = [c for c in candidates if c not in store]
    if missing:
        raise ScoringError(f"candidate(s) not in store: {missing[:5]}")
    uniq = list(dict.fromkeys(candidates))
    dists = score_candidates(query, [store[c] for c in uniq], weights)
    return rank_by_distance(zip(uniq, dists))


# ---------------------------------------------------------------------------
# TREC run files: "qid Q0 docid rank score tag", score = -distance


def format_run(runs: Mapping[str, RankedList], tag: str = "wchamfer") -> str:
    lines = []
    for qid in sorted(runs):
        for rank, (docid, dist) in enumerate(runs[qid], 1):
            lines.append(f"{qid} Q0 {docid} {rank} {0.0 - dist:.17g} {tag}\n")
    return "".join(lines)


def write_run(runs: Mapping[str, RankedList], path: str | Path, tag: str = "wchamfer") -> None:
    atomic_write(path, format_run(runs, tag))


def read_run(path: str | Path) -> dict[str, list[tuple[str, float]]]:
    """Parse a TREC run into ``qid -> [(docid, score), ...]`` ordered by rank.

    Scores are returned as written (larger is better).
    """
    rows: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 columns, got {len(parts)}")
            qid, _, docid, rank, score, _ = parts
            try:
                rows.setdefault(qid, []).append((int(rank), docid, float(score)))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad rank or score") from None
    out = {}
    for qid, entries in rows.items():
        entries.sort(key=lambda e: (e[0], -e[2], e[1]))
        seen = set()
        out[qid] = []
        for _, docid, score in entries:
            if docid not in seen:
                seen.add(docid)
                out[qid].append((docid, score))
    return out
