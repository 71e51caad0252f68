"""Ranking metrics (Recall@k, MRR@k, nDCG@k) and TREC qrels handling."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from ._io import atomic_write

logger = logging.getLogger(__name__)

Qrels = dict[str, dict[str, int]]
METRICS = ("recall", "mrr", "ndcg")


class NoRelevantError(ValueError):
    """The query has no document with grade > 0."""


def read_qrels(path: str | Path) -> Qrels:
    """Read ``qid 0 docid grade`` lines."""
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'qid 0 docid grade'")
            qid, _, docid, grade = parts
            try:
                g = int(grade)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: grade must be an integer") from None
            if g < 0:
                raise ValueError(f"{path}:{lineno}: negative grade")
            judged = qrels.setdefault(qid, {})
            if docid in judged:
                raise ValueError(f"{path}:{lineno}: duplicate judgment for ({qid}, {docid})")
            judged[docid] = g
    return qrels


def write_qrels(qrels: Mapping[str, Mapping[str, int]], path: str | Path) -> None:
    lines = [f"{qid} 0 {docid} {g}\n" for qid in sorted(qrels) for docid, g in sorted(qrels[qid].items())]
    atomic_write(path, "".join(lines))


def _doc_ids(ranked) -> list[str]:
    return [r if isinstance(r, str) else r[0] for r in ranked]


def _judgments(qrels: Mapping[str, Mapping[str, int]], qid: str, k: int) -> Mapping[str, int]:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    judged = qrels.get(qid, {})
    if not any(g > 0 for g in judged.values()):
        raise NoRelevantError(f"query {qid!r} has no relevant documents")
    return judged


def recall_at_k(ranked, qrels, qid: str, k: int) -> float:
    judged = _judgments(qrels, qid, k)
    relevant = {d for d, g in judged.items() if g > 0}
    hits = len(relevant.intersection(_doc_ids(ranked)[:k]))
    return hits / len(relevant)


def mrr_at_k(ranked, qrels, qid: str, k: int) -> float:
    judged = _judgments(qrels, qid, k)
    for rank, doc in enumerate(_doc_ids(ranked)[:k], 1):
        if judged.get(doc, 0) > 0:
            return 1.0 / rank
    return 0.0


def _dcg(grades: Sequence[int]) -> float:
    return sum(g / math.log2(i + 2) for i, g in enumerate(grades))


def ndcg_at_k(ranked, qrels, qid: str, k: int) -> float:
    """nDCG with linear gain; DCG and ideal DCG share one summation routine."""
    judged = _judgments(qrels, qid, k)
    gains = [judged.get(doc, 0) for doc in _doc_ids(ranked)[:k]]
    ideal = sorted(judged.values(), reverse=True)[:k]
    idcg = _dcg(ideal)
    return 0.0 if idcg == 0 else _dcg(gains) / idcg


_FUNCS = {"recall": recall_at_k, "mrr": mrr_at_k, "ndcg": ndcg_at_k}


@dataclass
class MetricsReport:
    ks: tuple[int, ...]
    per_query: dict[tuple[str, int, str], float] = field(default_factory=dict)
    means: dict[tuple[str, int], float] = field(default_factory=dict)
    evaluated: list[str] = field(default_factory=list)
    no_relevant: list[str] = field(default_factory=list)
    missing_qrels: list[str] = field(default_factory=list)

    def mean(self, metric: str, k: int) -> float:
        return self.means[(metric, k)]

    def to_csv(self) -> str:
        lines = ["metric,k,qid,value\n"]
        for metric in METRICS:
            for k in self.ks:
                for qid in self.evaluated:
                    lines.append(f"{metric},{k},{qid},{self.per_query[(metric, k, qid)]:.17g}\n")
                lines.append(f"{metric},{k},ALL,{self.means[(metric, k)]:.17g}\n")
        return "".join(lines)


def evaluate(runs: Mapping[str, Sequence], qrels: Mapping[str, Mapping[str, int]], ks: Iterable[int]) -> MetricsReport:
    """Per-query metrics and unweighted means over queries with at least one relevant doc.

    Queries missing from the qrels, or with no relevant documents, are left
    out of the means and listed on the report.
    """
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValueError("cutoffs must be >= 1")
    report = MetricsReport(ks)
    for qid in sorted(runs):
        if qid not in qrels:
            report.missing_qrels.append(qid)
            continue
        if not any(g > 0 for g in qrels[qid].values()):
            report.no_relevant.append(qid)
            continue
        report.evaluated.append(qid)
        for metric, fn in _FUNCS.items():
            for k in ks:
                report.per_query[(metric, k, qid)] = fn(runs[qid], qrels, qid, k)
    if report.missing_qrels:
        logger.warning("%d run queries have no qrels and were skipped", len(report.missing_qrels))
    if report.no_relevant:
        logger.warning("%d queries have no relevant documents and were skipped", len(report.no_relevant))
    n = len(report.evaluated)
    for metric in METRICS:
        for k in ks:
            vals = [report.per_query[(metric, k, q)] for q in report.evaluated]
            report.means[(metric, k)] = math.fsum(vals) / n if n else 0.0
    return report
