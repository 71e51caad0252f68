"""BM25 first-stage retrieval over pre-tokenized documents."""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass

import numpy as np

K1 = 1.5
B = 0.75


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class InvertedIndex:
    doc_ids: tuple[str, ...]
    postings: dict[int, tuple[np.ndarray, np.ndarray]]  # token -> (ordinals, term freqs)
    doc_len: np.ndarray
    avgdl: float

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    def df(self, token: int) -> int:
        entry = self.postings.get(int(token))
        return 0 if entry is None else len(entry[0])


def build_index(corpus: Mapping[str, Iterable[int]]) -> InvertedIndex:
    if not corpus:
        raise RetrievalError("empty corpus")
    doc_ids = tuple(corpus)
    doc_len = np.empty(len(doc_ids), dtype=np.int64)
    acc: dict[int, tuple[list[int], list[int]]] = {}
    for ordinal, doc_id in enumerate(doc_ids):
        toks = np.asarray(list(corpus[doc_id]), dtype=np.int64)
        if toks.size == 0:
            raise RetrievalError(f"empty document {doc_id!r}")
        doc_len[ordinal] = toks.size
        uniq, tf = np.unique(toks, return_counts=True)
        for t, c in zip(uniq.tolist(), tf.tolist()):
            ords, tfs = acc.setdefault(t, ([], []))
            ords.append(ordinal)
            tfs.append(c)
    postings = {t: (np.array(o, dtype=np.int64), np.array(f, dtype=np.int64)) for t, (o, f) in acc.items()}
    return InvertedIndex(doc_ids, postings, doc_len, float(doc_len.mean()))


def bm25_scores(index: InvertedIndex, query_tokens: Iterable[int], k1: float = K1, b: float = B) -> np.ndarray:
    """BM25 score of every document; each distinct query term counts once."""
    scores = np.zeros(index.n_docs)
    norm = k1 * (1.0 - b + b * index.doc_len / index.avgdl)
    for t in sorted({int(t) for t in query_tokens}):
        entry = index.postings.get(t)
        if entry is None:
            continue
        ords, tf = entry
        df = len(ords)
        idf = np.log(1.0 + (index.n_docs - df + 0.5) / (df + 0.5))
        scores[ords] += idf * tf / (tf + norm[ords])
    return scores


def bm25_topk(
    index: InvertedIndex, query_tokens: Iterable[int], k: int, k1: float = K1, b: float = B
) -> list[tuple[str, float]]:
    """Top-``k`` documents sharing at least one term with the query, best first.

    Ties are broken by doc id.
    """
    if k < 1:
        raise RetrievalError("k must be >= 1")
    query_tokens = list(query_tokens)
    scores = bm25_scores(index, query_tokens, k1, b)
    matched = np.zeros(index.n_docs, dtype=bool)
    for t in set(int(t) for t in query_tokens):
        if t in index.postings:
            matched[index.postings[t][0]] = True
    hits = [(index.doc_ids[i], float(scores[i])) for i in np.flatnonzero(matched)]
    hits.sort(key=lambda h: (-h[1], h[0]))
    return hits[:k]
