import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wchamfer.store import Vocab
from wchamfer.weights import (
    DocFreq,
    Provenance,
    SpecialPolicy,
    WeightError,
    WeightTable,
    backfill_unseen,
    compute_idf,
    count_doc_freq,
    idf,
    load_weights,
    normalize_sum,
    save_weights,
)


def test_doc_freq_counts_presence():
    df = count_doc_freq({"d": [3, 3]}, 5)
    assert df.n_docs == 1 and df.counts[3] == 1


def test_doc_freq_direct_count():
    df = count_doc_freq([[0, 1], [1], [2]], 4)
    assert df.n_docs == 3
    np.testing.assert_array_equal(df.counts, [1, 2, 1, 0])


def test_doc_freq_subsample_deterministic():
    rng = np.random.default_rng(0)
    corpus = [rng.integers(0, 30, size=8) for _ in range(200)]
    a = count_doc_freq(corpus, 30, 0.5, seed=7)
    b = count_doc_freq(corpus, 30, 0.5, seed=7)
    c = count_doc_freq(corpus, 30, 0.5, seed=8)
    assert a.n_docs == 100
    np.testing.assert_array_equal(a.counts, b.counts)
    assert not np.array_equal(a.counts, c.counts)


@pytest.mark.parametrize("corpus, vocab", [([], 3), ([[5]], 3), ([[-1]], 3)])
def test_doc_freq_errors(corpus, vocab):
    with pytest.raises(WeightError):
        count_doc_freq(corpus, vocab)


def test_idf_hand_values():
    assert idf(1, 1) == pytest.approx(math.log(4 / 3), abs=1e-15)
    assert idf(1, 1) == pytest.approx(0.287682, abs=1e-6)
    assert idf(3, 1) == pytest.approx(math.log(8 / 3), abs=1e-15)
    assert idf(3, 1) == pytest.approx(0.980829, abs=1e-6)


def test_compute_idf_unnormalized_and_absent_tokens():
    df = count_doc_freq([[0], [1], [2]], 4)
    table = compute_idf(df, Vocab(4), normalize=False)
    np.testing.assert_allclose(table.w[:3], math.log(8 / 3), rtol=1e-15)
    assert table.w[3] == 0.0
    assert table.provenance is Provenance.IDF


def test_compute_idf_special_policy():
    df = count_doc_freq([[0, 1], [1]], 3)
    vocab = Vocab(3, frozenset({1}))
    one = compute_idf(df, vocab, SpecialPolicy.ONE, normalize=False)
    zero = compute_idf(df, vocab, "zero", normalize=False)
    assert one.w[1] == 1.0 and zero.w[1] == 0.0
    assert one.w[0] == zero.w[0] == pytest.approx(math.log(1.5 / 1.5 + 1))


def test_compute_idf_normalized_sums_to_one():
    rng = np.random.default_rng(1)
    table = compute_idf(count_doc_freq([rng.integers(0, 40, 10) for _ in range(50)], 40), Vocab(40))
    assert abs(math.fsum(table.w) - 1.0) <= 1e-9


def test_compute_idf_errors():
    with pytest.raises(WeightError):
        compute_idf(DocFreq(0, np.zeros(3, dtype=np.int64)), Vocab(3))
    with pytest.raises(WeightError):
        compute_idf(count_doc_freq([[0]], 2), Vocab(3))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10_000), st.data())
def test_idf_monotone_and_positive(n_docs, data):
    n1 = data.draw(st.integers(1, n_docs))
    n2 = data.draw(st.integers(1, n_docs))
    assert idf(n_docs, n1) > 0
    if n1 < n2:
        assert idf(n_docs, n1) > idf(n_docs, n2)


@pytest.mark.parametrize(
    "w, expected",
    [((2.0, 2.0), (0.5, 0.5)), ((1.0, 0.0, 0.0), (1.0, 0.0, 0.0)), ((3.0, 1.0), (0.75, 0.25))],
)
def test_normalize_examples(w, expected):
    np.testing.assert_allclose(normalize_sum(WeightTable(np.array(w))).w, expected, rtol=0, atol=1e-15)


def test_normalize_errors():
    with pytest.raises(WeightError):
        normalize_sum(WeightTable(np.array([1.0, -1.0])))


def test_table_rejects_non_finite():
    with pytest.raises(WeightError):
        WeightTable(np.array([1.0, np.inf]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.001, 1e3), min_size=1, max_size=30))
def test_normalize_idempotent_and_order_preserving(values):
    once = normalize_sum(WeightTable(np.array(values)))
    twice = normalize_sum(once)
    assert once.w.tobytes() == twice.w.tobytes()
    assert abs(math.fsum(once.w) - 1.0) <= 1e-9
    assert np.array_equal(np.argsort(once.w, kind="stable"), np.argsort(np.array(values), kind="stable"))


def test_backfill_hand_example():
    idf_t = WeightTable(np.array([0.1, 0.2, 0.3, 0.4]), Provenance.IDF)
    learned = WeightTable(np.array([0.0, 0.75, 0.25, 0.0]), Provenance.LEARNED)
    out = backfill_unseen(learned, idf_t, {1, 2})
    # seen mass 0.5 split 3:1; unseen keep IDF
    np.testing.assert_allclose(out.w, [0.1, 0.375, 0.125, 0.4], rtol=0, atol=1e-15)
    assert out.provenance is Provenance.BACKFILLED


def test_backfill_rejects_non_positive_mass():
    idf_t = WeightTable(np.ones(3))
    with pytest.raises(WeightError):
        backfill_unseen(WeightTable(np.array([1.0, -1.0, 0.0])), idf_t, {0, 1})
    with pytest.raises(WeightError):
        backfill_unseen(WeightTable(np.ones(2)), idf_t, {0})


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 40))
def test_backfill_mass_and_order(seed, size):
    rng = np.random.default_rng(seed)
    idf_t = WeightTable(rng.uniform(0.01, 2.0, size))
    learned = WeightTable(rng.uniform(0.01, 1.0, size))
    seen = sorted(set(rng.choice(size, size=int(rng.integers(1, size + 1))).tolist()))
    out = backfill_unseen(learned, idf_t, seen)
    assert abs(math.fsum(out.w[seen]) - math.fsum(idf_t.w[seen])) <= 1e-12
    unseen = sorted(set(range(size)) - set(seen))
    np.testing.assert_array_equal(out.w[unseen], idf_t.w[unseen])
    for a in seen:
        for b in seen:
            assert (learned.w[a] < learned.w[b]) == (out.w[a] < out.w[b])


def test_weight_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    table = compute_idf(count_doc_freq([rng.integers(0, 50, 10) for _ in range(30)], 50), Vocab(50, frozenset({0})))
    p = tmp_path / "w.tsv"
    save_weights(table, p)
    back = load_weights(p)
    assert back == table
    np.testing.assert_allclose(back.w, table.w, rtol=0, atol=1e-15)
    text = p.read_text().splitlines()
    assert text[:3] == ["# vocab_size=50", "# provenance=idf", "# special_policy=one"]
    assert len(text) == 3 + np.count_nonzero(table.w)


def test_weight_file_parse_error_has_line(tmp_path):
    p = tmp_path / "w.tsv"
    p.write_text("# vocab_size=3\n0\t0.5\n1\tabc\n")
    with pytest.raises(WeightError, match=":3:"):
        load_weights(p)


def test_weight_file_duplicate_token(tmp_path):
    p = tmp_path / "w.tsv"
    p.write_text("# vocab_size=3\n0\t0.5\n0\t0.5\n")
    with pytest.raises(WeightError, match="duplicate token"):
        load_weights(p)


def test_weight_file_missing_header_and_range(tmp_path):
    p = tmp_path / "w.tsv"
    p.write_text("0\t1\n")
    with pytest.raises(WeightError, match="vocab_size"):
        load_weights(p)
    p.write_text("# vocab_size=2\n5\t1\n")
    with pytest.raises(WeightError, match="outside"):
        load_weights(p)
