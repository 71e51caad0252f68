"""Few-shot token weight training.

The loss for one query is a softmax cross-entropy over negated weighted
Chamfer distances, blended over two nested sets of hard negatives::

    L(q) = alpha * CE(q; positives, hard1) + (1 - alpha) * CE(q; positives, hard2)

Because the distance is linear in the weights, each query's candidates are
reduced once to a dense feature matrix over the query's own tokens; the
training loop never touches embedding vectors.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .scoring import FeatureVector, _as_weights, score_candidates
from .store import EmbeddingStore
from .weights import Provenance, WeightTable, normalize_sum

logger = logging.getLogger(__name__)

SOFTMAX_TOL = 1e-12


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    lambda1_size: int = 10
    lambda2_size: int = 100
    lr0: float = 1e-4
    lr_min: float = 1e-8
    iterations: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise TrainingError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.alpha > 0 and self.lambda1_size > self.lambda2_size:
            raise TrainingError("lambda1_size must not exceed lambda2_size")
        if self.lambda1_size < 0 or self.lambda2_size < 0 or self.iterations < 0:
            raise TrainingError("sizes and iterations must be non-negative")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str | float | int]) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                caster = int if f.type in ("int", int) else float
                try:
                    kwargs[f.name] = caster(values[f.name])
                except ValueError:
                    raise TrainingError(f"bad value for {f.name}: {values[f.name]!r}") from None
        return cls(**kwargs)

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())


@dataclass(eq=False)
class TrainQuery:
    """One training query with its positives, negative pool, and precomputed features."""

    qid: str
    positives: tuple[str, ...]
    negative_pool: tuple[str, ...]
    features: Mapping[str, FeatureVector]
    tokens: np.ndarray = field(init=False, repr=False)
    matrix: np.ndarray = field(init=False, repr=False)
    rows: dict[str, int] = field(init=False, repr=False)
    pool_order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.positives = tuple(dict.fromkeys(self.positives))
        self.negative_pool = tuple(dict.fromkeys(self.negative_pool))
        if not self.positives:
            raise TrainingError(f"query {self.qid!r} has no positives")
        overlap = set(self.positives) & set(self.negative_pool)
        if overlap:
            raise TrainingError(f"query {self.qid!r}: items both positive and negative: {sorted(overlap)[:5]}")
        items = self.positives + self.negative_pool
        missing = [i for i in items if i not in self.features]
        if missing:
            raise TrainingError(f"query {self.qid!r}: no features for {missing[:5]}")
        self.rows = {item: r for r, item in enumerate(items)}
        # pool rows sorted by item_id: the tie-break order for mining
        self.pool_order = np.array(
            sorted(range(len(self.positives), len(items)), key=lambda r: items[r]), dtype=np.int64
        )
        feats = [self.features[i] for i in items]
        self.tokens = np.unique(np.concatenate([f.token_ids for f in feats]))
        self.matrix = np.zeros((len(items), len(self.tokens)))
        for r, f in enumerate(feats):
            self.matrix[r, np.searchsorted(self.tokens, f.token_ids)] = f.values

    def distances(self, w: np.ndarray) -> np.ndarray:
        """Weighted Chamfer distance of every positive and pool item, in row order."""
        return self.matrix @ w[self.tokens]

    def pool_rows(self, items: Iterable[str]) -> np.ndarray:
        n_pos = len(self.positives)
        rows = []
        for item in items:
            r = self.rows.get(item, -1)
            if r < n_pos:
                raise TrainingError(f"query {self.qid!r}: negative {item!r} is not in the negative pool")
            rows.append(r)
        return np.array(rows, dtype=np.int64)


def _ce_parts(q: TrainQuery, neg_rows: np.ndarray, w: np.ndarray, need_grad: bool):
    n_pos = len(q.positives)
    rows = np.concatenate([np.arange(n_pos), neg_rows])
    eta = q.matrix[rows] @ w[q.tokens]
    logits = -eta
    top = logits.max()
    ex = np.exp(logits - top)
    z = ex.sum()
    lse = top + math.log(z)
    loss = math.fsum(eta[:n_pos]) + n_pos * lse
    if not need_grad:
        return loss, None, None
    p = ex / z
    local = q.matrix[:n_pos].sum(axis=0) - n_pos * (p @ q.matrix[rows])
    grad = np.zeros(len(w))
    grad[q.tokens] = local
    return loss, grad, p


def candidate_probs(q: TrainQuery, negatives: Sequence[str], weights) -> dict[str, float]:
    """Softmax probabilities over positives and ``negatives`` under the current weights."""
    w = _as_weights(weights)
    neg_rows = q.pool_rows(negatives)
    _, _, p = _ce_parts(q, neg_rows, w, need_grad=True)
    names = list(q.positives) + list(negatives)
    return dict(zip(names, p.tolist()))


def ce_loss(q: TrainQuery, negatives: Sequence[str], weights) -> float:
    w = _as_weights(weights)
    loss, _, _ = _ce_parts(q, q.pool_rows(negatives), w, need_grad=False)
    return loss


def ce_grad(q: TrainQuery, negatives: Sequence[str], weights) -> np.ndarray:
    """Closed-form gradient: sum of positive features minus |positives| times the softmax mean feature."""
    w = _as_weights(weights)
    _, grad, p = _ce_parts(q, q.pool_rows(negatives), w, need_grad=True)
    if abs(p.sum() - 1.0) > SOFTMAX_TOL:
        raise TrainingError(f"softmax mass {p.sum()!r} drifted from 1")
    return grad


def blended_loss_grad(
    q: TrainQuery, hard1: Sequence[str], hard2: Sequence[str], alpha: float, weights
) -> tuple[float, np.ndarray]:
    if not 0.0 <= alpha <= 1.0:
        raise TrainingError(f"alpha must be in [0, 1], got {alpha}")
    if alpha > 0.0 and not set(hard1) <= set(hard2):
        raise TrainingError(f"query {q.qid!r}: first negative set is not contained in the second")
    w = _as_weights(weights)
    rows1 = q.pool_rows(hard1) if alpha > 0.0 else None
    rows2 = q.pool_rows(hard2) if alpha < 1.0 else None
    return _blended_rows(q, rows1, rows2, alpha, w)


def _blended_rows(q: TrainQuery, rows1, rows2, alpha: float, w: np.ndarray) -> tuple[float, np.ndarray]:
    loss, grad = 0.0, np.zeros(len(w))
    if alpha > 0.0:
        l1, g1, _ = _ce_parts(q, rows1, w, need_grad=True)
        loss += alpha * l1
        grad += alpha * g1
    if alpha < 1.0:
        l2, g2, _ = _ce_parts(q, rows2, w, need_grad=True)
        loss += (1.0 - alpha) * l2
        grad += (1.0 - alpha) * g2
    return loss, grad


def mine_hard_negatives(
    q: TrainQuery, weights, lambda1_size: int, lambda2_size: int
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """The closest pool items under the current weights; ties broken by item_id."""
    if lambda2_size > len(q.negative_pool) or lambda1_size > lambda2_size:
        raise TrainingError(
            f"query {q.qid!r}: sizes ({lambda1_size}, {lambda2_size}) exceed pool of {len(q.negative_pool)}"
        )
    rows1, rows2 = _mine_rows(q, _as_weights(weights), lambda1_size, lambda2_size)
    items = q.positives + q.negative_pool
    return tuple(items[r] for r in rows1), tuple(items[r] for r in rows2)


def _mine_rows(q: TrainQuery, w: np.ndarray, size1: int, size2: int) -> tuple[np.ndarray, np.ndarray]:
    eta = q.distances(w)[q.pool_order]
    # stable sort over item_id-sorted rows == sort by (distance, item_id)
    rows2 = q.pool_order[np.argsort(eta, kind="stable")[:size2]]
    return rows2[:size1], rows2


def cosine_lr(iteration: int, config: TrainConfig) -> float:
    if not 0 <= iteration <= config.iterations:
        raise TrainingError(f"iteration {iteration} outside [0, {config.iterations}]")
    if config.iterations == 0:
        return config.lr0
    cos = math.cos(math.pi * iteration / config.iterations)
    return config.lr_min + 0.5 * (config.lr0 - config.lr_min) * (1.0 + cos)


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(
    state: AdamState,
    grad: np.ndarray,
    lr: float,
    w: np.ndarray,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[AdamState, np.ndarray]:
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(grad).all():
        raise TrainingError("non-finite gradient")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    w_new = np.asarray(w, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(m, v, step), w_new


def seen_tokens(data: Iterable[TrainQuery]) -> np.ndarray:
    sets = [q.tokens for q in data]
    return np.unique(np.concatenate(sets)) if sets else np.array([], dtype=np.int64)


def _sizes(q: TrainQuery, config: TrainConfig) -> tuple[int, int]:
    s2 = min(config.lambda2_size, len(q.negative_pool))
    s1 = 0 if config.alpha == 0.0 else min(config.lambda1_size, s2)
    return s1, s2


def objective(data: Sequence[TrainQuery], config: TrainConfig, weights) -> tuple[float, np.ndarray]:
    """Total blended loss and gradient with negatives mined under ``weights``."""
    w = _as_weights(weights)
    total, grad = 0.0, np.zeros(len(w))
    for q in data:
        try:
            s1, s2 = _sizes(q, config)
            rows1, rows2 = _mine_rows(q, w, s1, s2)
            loss, g = _blended_rows(q, rows1, rows2, config.alpha, w)
        except TrainingError as exc:
            raise TrainingError(f"[qid {q.qid}] {exc}") from exc
        total += loss
        grad += g
    return total, grad


def train(
    data: Sequence[TrainQuery],
    config: TrainConfig,
    init: WeightTable | None = None,
    vocab_size: int | None = None,
    history: list[tuple[int, float, float]] | None = None,
) -> WeightTable:
    """Full-batch Adam on the blended loss, re-mining negatives every iteration.

    Without ``init``, weights start uniform over the tokens of the training
    queries and 0 elsewhere; those other tokens then stay 0 since their
    gradient is identically 0. ``history`` receives ``(iter, lr, loss)`` rows.
    """
    seen = seen_tokens(data)
    if init is None:
        if vocab_size is None:
            raise TrainingError("need either init weights or vocab_size")
        if seen.size == 0:
            raise TrainingError("no training queries")
        w0 = np.zeros(vocab_size)
        w0[seen] = 1.0 / seen.size
        init = WeightTable(w0, Provenance.UNIFORM)
    if seen.size and seen[-1] >= len(init):
        raise TrainingError(f"token id {seen[-1]} outside weight table of size {len(init)}")
    for q in data:
        if config.lambda2_size > len(q.negative_pool):
            logger.debug("qid %s: pool of %d smaller than lambda2_size", q.qid, len(q.negative_pool))

    table = normalize_sum(init)
    w = table.w.copy()
    state = AdamState.zeros(len(w))
    for it in range(config.iterations):
        loss, grad = objective(data, config, w)
        lr = cosine_lr(it, config)
        if history is not None:
            history.append((it, lr, loss))
        state, w = adam_step(state, grad, lr, w, config.adam_beta1, config.adam_beta2, config.adam_eps)
        w = normalize_sum(WeightTable(w, Provenance.LEARNED, table.special_policy)).w
    return WeightTable(w, Provenance.LEARNED, table.special_policy)


# ---------------------------------------------------------------------------
# files


def read_kv(path: str | Path) -> dict[str, str]:
    """Flat ``key=value`` config lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise TrainingError(f"{path}:{lineno}: expected key=value")
            out[key.strip()] = value.strip()
    return out


def read_train_set(path: str | Path) -> dict[str, tuple[list[str], list[str]]]:
    """Parse ``qid<TAB>+item`` / ``qid<TAB>-item`` lines into ``qid -> (positives, pool)``."""
    out: dict[str, tuple[list[str], list[str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            qid, sep, tagged = line.partition("\t")
            if not sep or len(tagged) < 2 or tagged[0] not in "+-":
                raise TrainingError(f"{path}:{lineno}: expected qid<TAB>+item or qid<TAB>-item")
            pos, neg = out.setdefault(qid, ([], []))
            (pos if tagged[0] == "+" else neg).append(tagged[1:])
    return out


def write_train_set(labels: Mapping[str, tuple[Sequence[str], Sequence[str]]], path: str | Path) -> None:
    lines = []
    for qid, (pos, neg) in labels.items():
        lines.extend(f"{qid}\t+{item}\n" for item in pos)
        lines.extend(f"{qid}\t-{item}\n" for item in neg)
    atomic_write(path, "".join(lines))


def build_train_queries(
    labels: Mapping[str, tuple[Sequence[str], Sequence[str]]],
    queries: EmbeddingStore,
    docs: EmbeddingStore,
) -> list[TrainQuery]:
    out = []
    for qid, (pos, neg) in labels.items():
        if qid not in queries:
            raise TrainingError(f"query {qid!r} not in the query store")
        items = list(dict.fromkeys(list(pos) + list(neg)))
        missing = [i for i in items if i not in docs]
        if missing:
            raise TrainingError(f"[qid {qid}] documents not in store: {missing[:5]}")
        feats = score_candidates(queries[qid], [docs[i] for i in items])
        out.append(TrainQuery(qid, tuple(pos), tuple(neg), dict(zip(items, feats))))
    return out


def format_train_log(history: Iterable[tuple[int, float, float]]) -> str:
    return "iter,lr,loss\n" + "".join(f"{i},{lr:.17g},{loss:.17g}\n" for i, lr, loss in history)
