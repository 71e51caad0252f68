"""Synthetic multi-vector data with planted token weights.

Every token id owns a random direction on the unit sphere; each occurrence of
the token is that direction, optionally jittered by Gaussian ``noise`` and
re-normalized. Scores are weighted Chamfer distances under the planted
weights, so they are exact linear functions of the pair features.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .retrieval import bm25_topk, build_index
from .scoring import extract_features, score_candidates, weighted_chamfer
from .store import EmbeddingStore, MultiVecRecord, Vocab, save_store, write_tokenized
from .evaluation import write_qrels
from .trainer import write_train_set
from .weights import Provenance, WeightTable, save_weights


def _parse_range(value) -> tuple[int, int]:
    if isinstance(value, (tuple, list)):
        lo, hi = value
    else:
        text = str(value)
        lo, _, hi = text.partition("-")
        hi = hi or lo
    lo, hi = int(lo), int(hi)
    if lo < 1 or hi < lo:
        raise ValueError(f"bad length range {value!r}")
    return lo, hi


def _config_from(cls, values: Mapping[str, object]):
    kwargs = {}
    for f in fields(cls):
        if f.name not in values:
            continue
        raw = values[f.name]
        if f.name.endswith("_len"):
            kwargs[f.name] = _parse_range(raw)
        elif f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = str(raw)
    unknown = set(values) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**kwargs)


def _config_text(cfg) -> str:
    out = []
    for k, v in asdict(cfg).items():
        if isinstance(v, tuple):
            v = f"{v[0]}-{v[1]}"
        out.append(f"{k}={v}\n")
    return "".join(out)


@dataclass(frozen=True)
class SyntheticSpec:
    vocab_size: int = 64
    dim: int = 16
    n_queries: int = 500
    n_docs: int = 500
    query_len: tuple[int, int] = (4, 12)
    doc_len: tuple[int, int] = (8, 32)
    planted: str = "random-simplex"
    pairing: str = "zip"
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "query_len", _parse_range(self.query_len))
        object.__setattr__(self, "doc_len", _parse_range(self.doc_len))
        if self.vocab_size < self.query_len[1]:
            raise ValueError("vocab_size must be at least the longest query")
        if self.planted not in ("random-simplex", "uniform"):
            raise ValueError(f"unknown planted weights {self.planted!r}")
        if self.pairing not in ("zip", "all"):
            raise ValueError(f"unknown pairing {self.pairing!r}")
        if self.pairing == "zip" and self.n_queries != self.n_docs:
            raise ValueError("zip pairing needs n_queries == n_docs")

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "SyntheticSpec":
        return _config_from(cls, values)

    def to_text(self) -> str:
        return _config_text(self)


def planted_weights(spec: SyntheticSpec) -> np.ndarray:
    if spec.planted == "uniform":
        return np.full(spec.vocab_size, 1.0 / spec.vocab_size)
    rng = np.random.default_rng([spec.seed, 1])
    return rng.dirichlet(np.ones(spec.vocab_size))


def token_directions(vocab_size: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((vocab_size, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _embed(tokens: np.ndarray, base: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    vecs = base[tokens]
    if noise > 0:
        vecs = vecs + noise * rng.standard_normal(vecs.shape)
        vecs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    return vecs.astype(np.float32)


def _draw_items(prefix, count, length, vocab_size, replace, base, noise, rng):
    recs = []
    for i in range(count):
        n = int(rng.integers(length[0], length[1] + 1))
        toks = rng.choice(vocab_size, size=n, replace=replace)
        recs.append(MultiVecRecord(f"{prefix}{i}", toks, _embed(toks, base, noise, rng)))
    return recs


def generate_synthetic(spec: SyntheticSpec) -> tuple[EmbeddingStore, list[tuple[str, str]], np.ndarray]:
    """Queries ``q<i>`` and documents ``d<j>`` in one store, the scored pairs, and their scores.

    Queries draw distinct tokens; documents draw with replacement. With
    ``pairing="zip"`` pair i is ``(q<i>, d<i>)``, i.e. i.i.d. pairs;
    ``"all"`` scores every query against every document.
    """
    rng = np.random.default_rng([spec.seed, 0])
    base = token_directions(spec.vocab_size, spec.dim, rng)
    queries = _draw_items("q", spec.n_queries, spec.query_len, spec.vocab_size, False, base, spec.noise, rng)
    docs = _draw_items("d", spec.n_docs, spec.doc_len, spec.vocab_size, True, base, spec.noise, rng)
    store = EmbeddingStore.from_records(spec.dim, Vocab(spec.vocab_size), queries + docs)

    if spec.pairing == "zip":
        pairs = [(q.item_id, d.item_id) for q, d in zip(queries, docs)]
    else:
        pairs = [(q.item_id, d.item_id) for q in queries for d in docs]
    w_star = planted_weights(spec)
    scores = np.array([weighted_chamfer(extract_features(store[q], store[d]), w_star) for q, d in pairs])
    return store, pairs, scores


# ---------------------------------------------------------------------------
# planted few-shot retrieval task


@dataclass(frozen=True)
class PlantedTaskSpec:
    """A retrieval task whose single relevant document per query is the one
    closest under planted weights."""

    vocab_size: int = 200
    dim: int = 16
    n_docs: int = 500
    n_train: int = 80
    n_val: int = 20
    n_test: int = 50
    query_len: tuple[int, int] = (6, 12)
    doc_len: tuple[int, int] = (16, 40)
    concentration: float = 0.3
    noise: float = 0.05
    pool_size: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "query_len", _parse_range(self.query_len))
        object.__setattr__(self, "doc_len", _parse_range(self.doc_len))
        if self.vocab_size < self.query_len[1]:
            raise ValueError("vocab_size must be at least the longest query")

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "PlantedTaskSpec":
        return _config_from(cls, values)

    def to_text(self) -> str:
        return _config_text(self)


@dataclass
class PlantedTask:
    spec: PlantedTaskSpec
    planted: np.ndarray
    queries: EmbeddingStore
    docs: EmbeddingStore
    splits: dict[str, list[str]]  # "train" / "val" / "test" -> qids
    relevant: dict[str, str]
    labels: dict[str, tuple[list[str], list[str]]]  # qid -> (positives, BM25 negative pool)


def generate_planted_task(spec: PlantedTaskSpec) -> PlantedTask:
    rng = np.random.default_rng([spec.seed, 2])
    planted = rng.dirichlet(np.full(spec.vocab_size, spec.concentration))
    base = token_directions(spec.vocab_size, spec.dim, rng)
    docs = _draw_items("d", spec.n_docs, spec.doc_len, spec.vocab_size, True, base, spec.noise, rng)
    n_q = spec.n_train + spec.n_val + spec.n_test
    queries = _draw_items("q", n_q, spec.query_len, spec.vocab_size, False, base, spec.noise, rng)
    doc_store = EmbeddingStore.from_records(spec.dim, Vocab(spec.vocab_size), docs)
    query_store = EmbeddingStore.from_records(spec.dim, Vocab(spec.vocab_size), queries)

    index = build_index(doc_store.tokenized())
    doc_ids = list(doc_store)
    relevant, labels = {}, {}
    for q in queries:
        dists = score_candidates(q, docs, planted)
        best = doc_ids[min(range(len(docs)), key=lambda i: (dists[i], doc_ids[i]))]
        relevant[q.item_id] = best
        hits = bm25_topk(index, q.token_ids, spec.pool_size + 1)
        pool = [d for d, _ in hits if d != best][: spec.pool_size]
        labels[q.item_id] = ([best], pool)

    qids = list(query_store)
    splits = {
        "train": qids[: spec.n_train],
        "val": qids[spec.n_train : spec.n_train + spec.n_val],
        "test": qids[spec.n_train + spec.n_val :],
    }
    return PlantedTask(spec, planted, query_store, doc_store, splits, relevant, labels)


def write_planted_task(task: PlantedTask, out_dir: str | Path) -> dict[str, Path]:
    """Write stores, corpus sidecar, label files, qrels, planted weights and a train config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "docs": out / "docs.mvst",
        "queries": out / "queries.mvst",
        "corpus": out / "corpus.tsv",
        "train": out / "train.tsv",
        "val": out / "val.tsv",
        "planted": out / "planted.tsv",
        "spec": out / "task.cfg",
        "train_config": out / "train.cfg",
    }
    save_store(task.docs, paths["docs"])
    save_store(task.queries, paths["queries"])
    write_tokenized(task.docs.tokenized(), paths["corpus"])
    for split in ("train", "val"):
        write_train_set({q: task.labels[q] for q in task.splits[split]}, paths[split])
    for split in ("train", "val", "test"):
        paths[f"{split}_qrels"] = out / f"{split}.qrels"
        write_qrels({q: {task.relevant[q]: 1} for q in task.splits[split]}, paths[f"{split}_qrels"])
    # ground truth; the provenance tag is nominal
    save_weights(WeightTable(task.planted, Provenance.LEARNED), paths["planted"])
    paths["spec"].write_text(task.spec.to_text(), encoding="utf-8")
    paths["train_config"].write_text(
        "query_store=queries.mvst\n"
        "doc_store=docs.mvst\n"
        "train_set=train.tsv\n"
        "val_set=val.tsv\n"
        "corpus=corpus.tsv\n"
        "out=learned.tsv\n"
        "log=train_log.csv\n"
        "report=selection.txt\n"
        f"seed={task.spec.seed}\n",
        encoding="utf-8",
    )
    return paths
