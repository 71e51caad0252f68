"""Checks of the structural claims behind weight learning.

* ``recover_weights``: with exact weighted Chamfer scores the weights are the
  solution of a linear least-squares problem, identifiable whenever the Gram
  matrix of pair features is non-singular.
* ``convexity_probe``: random chord tests of a loss function.
* ``sample_complexity_sweep``: recovery success as the number of pairs grows.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace

import numpy as np

from .scoring import FeatureVector, extract_features
from .synthetic import SyntheticSpec, generate_synthetic, planted_weights
from .trainer import TrainQuery, ce_loss

RECOVERY_TOL = 1e-6
CHORD_TOL = 1e-9
RANK_REL_TOL = 1e-10


class RecoveryError(ValueError):
    pass


@dataclass
class RecoveryReport:
    w_hat: np.ndarray  # length T; NaN on tokens never observed
    support: np.ndarray
    min_eig: float
    max_abs_err: float  # NaN unless planted weights were supplied
    rank_deficient: bool


def feature_matrix(features: Sequence[FeatureVector]) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(n, |support|)`` design matrix over the union of observed tokens."""
    support = np.unique(np.concatenate([f.token_ids for f in features]))
    x = np.zeros((len(features), len(support)))
    for i, f in enumerate(features):
        x[i, np.searchsorted(support, f.token_ids)] = f.values
    return support, x


def recover_weights(
    features: Sequence[FeatureVector],
    scores: Sequence[float],
    vocab_size: int | None = None,
    planted: np.ndarray | None = None,
) -> RecoveryReport:
    """Least-squares weights from exact scores via the normal equations.

    The Gram matrix ``X^T X / n`` is eigendecomposed; eigenvalues at or below
    ``1e-10 * trace / |support|`` count as zero (rank deficiency) and their
    directions are dropped from the solve.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(features) == 0:
        raise RecoveryError("no samples")
    if len(features) != len(scores):
        raise RecoveryError("features and scores differ in length")
    if not np.isfinite(scores).all():
        raise RecoveryError("non-finite scores")

    support, x = feature_matrix(features)
    n = len(scores)
    gram = x.T @ x / n
    rhs = x.T @ scores / n
    eigvals, eigvecs = np.linalg.eigh(gram)
    threshold = RANK_REL_TOL * np.trace(gram) / len(support)
    keep = eigvals > threshold
    rank_deficient = bool(n < len(support) or not keep.all())
    coef = eigvecs[:, keep] @ ((eigvecs[:, keep].T @ rhs) / eigvals[keep])

    size = vocab_size if vocab_size is not None else int(support[-1]) + 1
    w_hat = np.full(size, np.nan)
    w_hat[support] = coef
    err = float("nan")
    if planted is not None:
        err = float(np.max(np.abs(coef - np.asarray(planted, dtype=np.float64)[support])))
    return RecoveryReport(w_hat, support, float(eigvals[0]), err, rank_deficient)


def recover_from_spec(spec: SyntheticSpec) -> RecoveryReport:
    store, pairs, scores = generate_synthetic(spec)
    feats = [extract_features(store[q], store[d]) for q, d in pairs]
    return recover_weights(feats, scores, spec.vocab_size, planted_weights(spec))


# ---------------------------------------------------------------------------
# convexity


@dataclass
class ConvexityReport:
    trials: int
    violations: int
    max_violation: float


LossFactory = Callable[[np.random.Generator], tuple[Callable[[np.ndarray], float], int]]


def convexity_probe(make_loss: LossFactory, trials: int, seed: int = 0, scale: float = 5.0) -> ConvexityReport:
    """Count chord violations f(l*a + (1-l)*b) > l*f(a) + (1-l)*f(b) + 1e-9.

    ``make_loss(rng)`` returns a fresh ``(loss, dim)`` instance for every
    trial; endpoints are drawn uniformly from ``[-scale, scale]^dim``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    violations, worst = 0, -np.inf
    for _ in range(trials):
        loss, dim = make_loss(rng)
        a = rng.uniform(-scale, scale, dim)
        b = rng.uniform(-scale, scale, dim)
        lam = rng.uniform()
        gap = loss(lam * a + (1 - lam) * b) - (lam * loss(a) + (1 - lam) * loss(b))
        worst = max(worst, gap)
        if gap > CHORD_TOL:
            violations += 1
    return ConvexityReport(trials, violations, float(worst))


def random_train_query(
    rng: np.random.Generator,
    vocab_size: int = 12,
    n_pos: int | None = None,
    n_pool: int | None = None,
    query_len: int | None = None,
) -> TrainQuery:
    """A query with random features shaped like real ones: nonnegative and at most 2 per position."""
    n_pos = n_pos or int(rng.integers(1, 4))
    n_pool = n_pool if n_pool is not None else int(rng.integers(1, 9))
    query_len = query_len or int(rng.integers(1, 9))
    tokens = rng.choice(vocab_size, size=query_len, replace=True)
    feats = {}
    for i in range(n_pos + n_pool):
        dists = rng.uniform(0.0, 2.0, size=query_len)
        uniq, inverse = np.unique(tokens, return_inverse=True)
        vals = np.bincount(inverse, weights=dists) / query_len
        feats[f"doc{i:03d}"] = FeatureVector(uniq, vals, query_len)
    items = list(feats)
    return TrainQuery("q", tuple(items[:n_pos]), tuple(items[n_pos:]), feats)


def ce_loss_factory(vocab_size: int = 12) -> LossFactory:
    """Random fixed-negative cross-entropy instances for ``convexity_probe``."""

    def make(rng: np.random.Generator):
        q = random_train_query(rng, vocab_size)
        k = int(rng.integers(0, len(q.negative_pool) + 1))
        negatives = tuple(rng.permutation(q.negative_pool)[:k])
        return (lambda w: ce_loss(q, negatives, w)), vocab_size

    return make


# ---------------------------------------------------------------------------
# sample complexity


@dataclass(frozen=True)
class SweepRow:
    n: int
    seed: int
    min_eig: float
    max_abs_err: float
    success: bool


def sample_complexity_sweep(spec: SyntheticSpec, n_grid: Sequence[int], repeats: int) -> list[SweepRow]:
    """Recovery from n i.i.d. pairs for every n in the grid and ``repeats`` seeds.

    Seeds are ``spec.seed + r``. Rows come back sorted by (n, seed).
    """
    rows = []
    for n in sorted(set(int(n) for n in n_grid)):
        for r in range(repeats):
            seed = spec.seed + r
            if n == 0:
                rows.append(SweepRow(0, seed, 0.0, float("nan"), False))
                continue
            rep = recover_from_spec(replace(spec, n_queries=n, n_docs=n, pairing="zip", seed=seed))
            ok = (not rep.rank_deficient) and rep.max_abs_err <= RECOVERY_TOL
            rows.append(SweepRow(n, seed, rep.min_eig, rep.max_abs_err, bool(ok)))
    return rows


def success_rates(rows: Sequence[SweepRow]) -> dict[int, float]:
    out: dict[int, list[bool]] = {}
    for row in rows:
        out.setdefault(row.n, []).append(row.success)
    return {n: sum(v) / len(v) for n, v in sorted(out.items())}


def format_sweep(rows: Sequence[SweepRow]) -> str:
    lines = ["n,seed,min_eig,max_abs_err,success\n"]
    for r in rows:
        lines.append(f"{r.n},{r.seed},{r.min_eig:.17g},{r.max_abs_err:.17g},{int(r.success)}\n")
    return "".join(lines)
