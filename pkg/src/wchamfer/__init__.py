"""Token-weighted Chamfer distance for multi-vector retrieval."""

from .evaluation import evaluate, mrr_at_k, ndcg_at_k, read_qrels, recall_at_k
from .retrieval import bm25_scores, bm25_topk, build_index
from .scoring import (
    FeatureVector,
    RankedList,
    chamfer,
    extract_features,
    rerank,
    score_candidates,
    weighted_chamfer,
)
from .store import EmbeddingStore, MultiVecRecord, StoreError, Vocab, load_store, save_store, validate_store
from .trainer import TrainConfig, TrainQuery, ce_grad, ce_loss, train
from .weights import Provenance, SpecialPolicy, WeightTable, backfill_unseen, compute_idf, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "EmbeddingStore",
    "FeatureVector",
    "MultiVecRecord",
    "Provenance",
    "RankedList",
    "SpecialPolicy",
    "StoreError",
    "TrainConfig",
    "TrainQuery",
    "Vocab",
    "WeightTable",
    "backfill_unseen",
    "bm25_scores",
    "bm25_topk",
    "build_index",
    "ce_grad",
    "ce_loss",
    "chamfer",
    "compute_idf",
    "evaluate",
    "extract_features",
    "load_store",
    "load_weights",
    "mrr_at_k",
    "ndcg_at_k",
    "read_qrels",
    "recall_at_k",
    "rerank",
    "save_store",
    "save_weights",
    "score_candidates",
    "train",
    "validate_store",
    "weighted_chamfer",
]
