import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wchamfer.scoring import (
    FeatureVector,
    ScoringError,
    chamfer,
    extract_features,
    features_from_min_dists,
    format_run,
    min_dists,
    read_run,
    rerank,
    score_candidates,
    weighted_chamfer,
    write_run,
)
from wchamfer.store import EmbeddingStore, MultiVecRecord, Vocab
from wchamfer.weights import WeightTable

from conftest import random_record


def rec(item_id, toks, vecs):
    return MultiVecRecord(item_id, toks, np.asarray(vecs, dtype=np.float32))


def brute_min_dists(q, d):
    qv, dv = q.vectors.astype(np.float64), d.vectors.astype(np.float64)
    return np.array([min(math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y))) for y in dv) for x in qv])


def pair(seed, vocab=20, dim=8, max_len=10):
    r = np.random.default_rng(seed)
    q = random_record(r, "q", vocab, dim, int(r.integers(1, max_len + 1)))
    d = random_record(r, "d", vocab, dim, int(r.integers(1, max_len + 1)))
    return q, d


# --- min_dists / chamfer -----------------------------------------------------


def test_identical_vector_gives_zero():
    q = rec("q", [0], [[0.6, 0.8]])
    d = rec("d", [1, 2], [[1.0, 0.0], [0.6, 0.8]])
    assert min_dists(q, d)[0] == 0.0


def test_hand_example_sqrt2():
    q = rec("q", [0], [[1, 0]])
    d = rec("d", [1, 2], [[0, 1], [-1, 0]])
    np.testing.assert_allclose(min_dists(q, d), [math.sqrt(2)], rtol=0, atol=1e-12)


def test_singleton_doc_is_pairwise_distance(rng):
    q, _ = pair(3)
    d = random_record(rng, "d", 20, 8, 1)
    expected = np.linalg.norm(q.vectors.astype(np.float64) - d.vectors[0].astype(np.float64), axis=1)
    np.testing.assert_allclose(min_dists(q, d), expected, rtol=0, atol=1e-12)


def test_self_distance_zero(rng):
    q = random_record(rng, "q", 20, 8, 7)
    assert chamfer(q, q) == 0.0


def test_chamfer_is_mean_of_min_dists():
    # query tokens at distance 0.3 and 0.5 from the single doc token along a circle
    def chord(theta):
        return [math.cos(theta), math.sin(theta)]

    angle = lambda c: 2 * math.asin(c / 2)  # chord length -> angle
    q = rec("q", [0, 1], [chord(angle(0.3)), chord(-angle(0.5))])
    d = rec("d", [2], [chord(0.0)])
    np.testing.assert_allclose(min_dists(q, d), [0.3, 0.5], atol=1e-7)
    assert chamfer(q, d) == pytest.approx(0.4, abs=1e-7)


def test_matches_brute_force():
    for seed in range(20):
        q, d = pair(seed)
        np.testing.assert_allclose(min_dists(q, d), brute_min_dists(q, d), rtol=0, atol=1e-12)


def test_errors():
    q = rec("q", [0], [[1, 0]])
    with pytest.raises(ScoringError, match="dimension"):
        min_dists(q, rec("d", [0], [[1, 0, 0]]))
    with pytest.raises(ScoringError, match="empty"):
        min_dists(q, MultiVecRecord("d", np.zeros(0), np.zeros((0, 2))))


# --- features ----------------------------------------------------------------


def test_features_distinct_tokens():
    f = features_from_min_dists([4, 7], [0.3, 0.5])
    assert f.as_dict() == pytest.approx({4: 0.15, 7: 0.25})
    assert f.query_len == 2


def test_features_repeated_token():
    f = features_from_min_dists([5, 5], [0.2, 0.4])
    assert f.as_dict() == pytest.approx({5: 0.3})


def test_weighted_hand_example():
    f = FeatureVector(np.array([1, 2]), np.array([0.15, 0.25]), 2)
    w = np.zeros(5)
    w[1] = 2.0
    assert weighted_chamfer(f, w) == pytest.approx(0.30, abs=1e-15)


def test_all_ones_weights_give_chamfer():
    for seed in range(50):
        q, d = pair(seed)
        assert abs(weighted_chamfer(extract_features(q, d), np.ones(20)) - chamfer(q, d)) <= 1e-9


def test_zero_weights():
    q, d = pair(1)
    assert weighted_chamfer(extract_features(q, d), WeightTable(np.zeros(20))) == 0.0


def test_token_out_of_range():
    f = FeatureVector(np.array([1, 9]), np.array([0.1, 0.2]), 2)
    with pytest.raises(ScoringError):
        weighted_chamfer(f, np.ones(5))


def test_feature_bounds():
    for seed in range(30):
        q, d = pair(seed, vocab=4)
        f = extract_features(q, d)
        mult = np.array([np.sum(q.token_ids == t) for t in f.token_ids])
        assert np.all(f.values >= 0)
        assert np.all(f.values <= 2 * mult / len(q) + 1e-12)
        assert set(f.token_ids.tolist()) <= set(q.token_ids.tolist())


def test_score_candidates_matches_single_pair_bit_exact(rng):
    q = random_record(rng, "q", 10, 8, 9)
    docs = [random_record(rng, f"d{i}", 10, 8, int(rng.integers(1, 20))) for i in range(15)]
    w = rng.uniform(0, 1, 10)
    feats = score_candidates(q, docs)
    dists = score_candidates(q, docs, w)
    for d, f, s in zip(docs, feats, dists):
        assert f == extract_features(q, d)
        assert s == weighted_chamfer(extract_features(q, d), w)


# --- invariants ----------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity_in_weights(seed, a, b):
    q, d = pair(seed)
    r = np.random.default_rng(seed + 1)
    w1, w2 = r.normal(size=20), r.normal(size=20)
    f = extract_features(q, d)
    lhs = weighted_chamfer(f, a * w1 + b * w2)
    rhs = a * weighted_chamfer(f, w1) + b * weighted_chamfer(f, w2)
    assert abs(lhs - rhs) <= 1e-9 * (abs(a) + abs(b)) + 1e-15


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_permutation_invariance_bit_exact(seed):
    q, d = pair(seed, vocab=5, max_len=12)
    r = np.random.default_rng(seed)
    pd = r.permutation(len(d))
    pq = r.permutation(len(q))
    d2 = MultiVecRecord("d", d.token_ids[pd], d.vectors[pd])
    q2 = MultiVecRecord("q", q.token_ids[pq], q.vectors[pq])
    base_c, base_f = chamfer(q, d), extract_features(q, d)
    assert chamfer(q, d2) == base_c and extract_features(q, d2) == base_f
    assert chamfer(q2, d) == base_c and extract_features(q2, d) == base_f


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_chamfer_bounds(seed):
    q, d = pair(seed)
    assert 0.0 <= chamfer(q, d) <= 2.0 + 1e-6


# --- rerank --------------------------------------------------------------------


def line_store():
    # doc "near" sits at distance 0.2 from the query, "far" at 0.4
    def at(c):
        t = 2 * math.asin(c / 2)
        return [[math.cos(t), math.sin(t)]]

    recs = [rec("far", [0], at(0.4)), rec("near", [0], at(0.2)), rec("tie", [0], at(0.4))]
    return rec("q", [0], [[1, 0]]), EmbeddingStore.from_records(2, Vocab(3), recs)


def test_rerank_singleton():
    q, store = line_store()
    out = rerank(q, ["far"], store, np.ones(3))
    assert out.ids == ["far"] and out[0][1] == pytest.approx(0.4, abs=1e-7)


def test_rerank_orders_ascending_with_id_tiebreak():
    q, store = line_store()
    out = rerank(q, ["tie", "far", "near"], store, np.ones(3))
    assert out.ids == ["near", "far", "tie"]
    assert out[0][1] < out[1][1] == out[2][1]


def test_rerank_exact_tie_uses_item_id():
    q = rec("q", [0], [[1, 0]])
    same = [[0.0, 1.0]]
    store = EmbeddingStore.from_records(2, Vocab(1), [rec("b", [0], same), rec("a", [0], same)])
    assert rerank(q, ["b", "a"], store, np.ones(1)).ids == ["a", "b"]


def test_rerank_missing_candidate():
    q, store = line_store()
    with pytest.raises(ScoringError):
        rerank(q, ["nope"], store, np.ones(3))


def test_rerank_scale_invariance(rng):
    q = random_record(rng, "q", 10, 8, 6)
    docs = [random_record(rng, f"d{i:02d}", 10, 8, 10) for i in range(30)]
    store = EmbeddingStore.from_records(8, Vocab(10), docs)
    w = rng.uniform(0, 1, 10)
    base = rerank(q, list(store), store, w).ids
    for c in (0.5, 3.0, 1e3):
        assert rerank(q, list(store), store, c * w).ids == base


# --- run files -----------------------------------------------------------------


def test_run_format_and_round_trip(tmp_path):
    q, store = line_store()
    runs = {"q2": rerank(q, ["near"], store, np.ones(3)), "q1": rerank(q, ["far", "near"], store, np.ones(3))}
    text = format_run(runs, "tag")
    lines = text.splitlines()
    assert lines[0].split()[:4] == ["q1", "Q0", "near", "1"]
    assert lines[0].split()[5] == "tag"
    assert float(lines[0].split()[4]) == -runs["q1"][0][1]
    write_run(runs, tmp_path / "run.txt", "tag")
    back = read_run(tmp_path / "run.txt")
    assert [d for d, _ in back["q1"]] == ["near", "far"]
    assert back["q1"][1][1] == -runs["q1"][1][1]


def test_zero_distance_prints_without_sign():
    q = rec("q", [0], [[1, 0]])
    store = EmbeddingStore.from_records(2, Vocab(1), [rec("d", [0], [[1, 0]])])
    assert format_run({"q": rerank(q, ["d"], store, np.ones(1))}).split()[4] == "0"
