import math

import numpy as np
import pytest

from wchamfer.store import MultiVecRecord


def unit_vectors(rng, n, dim):
    g = rng.standard_normal((n, dim))
    return (g / np.linalg.norm(g, axis=1, keepdims=True)).astype(np.float32)


def random_record(rng, item_id, vocab_size, dim, length):
    toks = rng.integers(0, vocab_size, size=length)
    return MultiVecRecord(item_id, toks, unit_vectors(rng, length, dim))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, w, h=1e-6):
    """Central finite-difference gradient of ``f`` at ``w``."""
    g = np.zeros_like(w)
    for i in range(len(w)):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def normwise_rel_err(g, fd):
    scale = max(np.max(np.abs(g)), np.max(np.abs(fd)))
    return 0.0 if scale == 0 else float(np.max(np.abs(g - fd)) / scale)


def brute_metrics(ranked, judged, k):
    """Recall, MRR and nDCG at k by direct enumeration of ranks."""
    relevant = [d for d, g in judged.items() if g > 0]
    top = ranked[:k]
    recall = sum(1 for d in relevant if d in top) / len(relevant)
    mrr = 0.0
    for pos in range(len(top)):
        if judged.get(top[pos], 0) > 0:
            mrr = 1.0 / (pos + 1)
            break
    dcg = 0.0
    for pos in range(len(top)):
        dcg += judged.get(top[pos], 0) / math.log2(pos + 2)
    best = sorted(judged.values(), reverse=True)
    idcg = 0.0
    for pos in range(min(k, len(best))):
        idcg += best[pos] / math.log2(pos + 2)
    return recall, mrr, (dcg / idcg if idcg > 0 else 0.0)


def random_metric_instance(rng):
    n_docs = int(rng.integers(1, 21))
    docs = [f"d{i}" for i in range(n_docs)]
    n_rel = int(rng.integers(1, min(5, n_docs) + 1))
    rel = rng.choice(n_docs, size=n_rel, replace=False)
    judged = {docs[i]: int(rng.integers(1, 4)) for i in rel}
    for i in rng.choice(n_docs, size=int(rng.integers(0, n_docs + 1)), replace=False):
        judged.setdefault(docs[i], 0)
    ranked = [docs[i] for i in rng.permutation(n_docs)]
    k = int(rng.integers(1, 25))
    return ranked, judged, k
