import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tripletrank.oracle import (OracleConfig, RankedList, oracle_similarity, rank_all,
                                rank_by_similarity, similarity_matrix, similarity_profile)

KINDS = ["weighted-jaccard", "weighted-cosine"]

unit_floats = st.floats(0.0, 1.0, allow_nan=False)


def tag_pairs(m_max=12):
    return st.integers(1, m_max).flatmap(
        lambda m: st.tuples(arrays(float, m, elements=unit_floats),
                            arrays(float, m, elements=unit_floats),
                            arrays(float, m, elements=st.floats(0.01, 10.0))))


def naive_jaccard(a, b, w):
    num = den = 0.0
    for ai, bi, wi in zip(a, b, w):
        num += wi * min(ai, bi)
        den += wi * max(ai, bi)
    return 0.0 if den == 0 else num / den


class TestOracleSimilarity:
    def test_hand_example(self):
        assert oracle_similarity([1.0, 0.5], [0.5, 1.0]) == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("kind", KINDS)
    def test_identity(self, kind):
        t = np.array([0.3, 0.0, 0.9, 0.25])
        assert oracle_similarity(t, t, OracleConfig(kind)) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("kind", KINDS)
    def test_disjoint_supports(self, kind):
        assert oracle_similarity([0.4, 0.0, 0.7], [0.0, 0.9, 0.0], OracleConfig(kind)) == 0.0

    @pytest.mark.parametrize("kind", KINDS)
    def test_all_zero_pair_is_zero(self, kind):
        assert oracle_similarity(np.zeros(3), np.zeros(3), OracleConfig(kind)) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            oracle_similarity([0.1, 0.2], [0.1, 0.2, 0.3])

    def test_weight_length_mismatch(self):
        with pytest.raises(ValueError):
            oracle_similarity([0.1, 0.2], [0.1, 0.2], OracleConfig(weights=(1.0, 2.0, 3.0)))

    def test_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            oracle_similarity([np.nan, 0.2], [0.1, 0.2])

    @pytest.mark.parametrize("bad", [(1.0, 0.0), (1.0, -2.0), (np.inf,)])
    def test_bad_weights(self, bad):
        with pytest.raises(ValueError):
            OracleConfig(weights=bad)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            OracleConfig("euclid")

    @given(tag_pairs())
    def test_matches_naive_loop(self, pair):
        a, b, w = pair
        cfg = OracleConfig(weights=tuple(w))
        assert oracle_similarity(a, b, cfg) == pytest.approx(naive_jaccard(a, b, w), rel=1e-12, abs=1e-15)

    @pytest.mark.parametrize("kind", KINDS)
    @given(pair=tag_pairs())
    def test_symmetric_bitwise_and_bounded(self, kind, pair):
        a, b, w = pair
        cfg = OracleConfig(kind, tuple(w))
        s = oracle_similarity(a, b, cfg)
        assert s == oracle_similarity(b, a, cfg)
        assert 0.0 <= s <= 1.0

    @given(tag_pairs(), st.floats(0.01, 100.0))
    def test_weight_scaling_invariance(self, pair, c):
        a, b, w = pair
        s1 = oracle_similarity(a, b, OracleConfig(weights=tuple(w)))
        s2 = oracle_similarity(a, b, OracleConfig(weights=tuple(c * w)))
        assert s1 == pytest.approx(s2, rel=1e-12, abs=1e-15)

    @given(arrays(float, 6, elements=unit_floats).filter(lambda t: t.max() > 0))
    def test_self_similarity_is_one(self, t):
        assert oracle_similarity(t, t) == pytest.approx(1.0, abs=1e-15)

    def test_cosine_value(self):
        # cos between (1, 1) and (1, 0) is 1/sqrt(2)
        s = oracle_similarity([1.0, 1.0], [1.0, 0.0], OracleConfig("weighted-cosine"))
        assert s == pytest.approx(1 / np.sqrt(2), abs=1e-15)


@pytest.mark.parametrize("kind", KINDS)
def test_similarity_matrix_bitwise_equals_scalar(kind, rng):
    tags = rng.uniform(size=(15, 7)) * (rng.uniform(size=(15, 7)) < 0.5)
    tags[3] = 0.0
    cfg = OracleConfig(kind, tuple(rng.uniform(0.5, 2.0, 7)))
    mat = similarity_matrix(tags, cfg)
    for i in range(15):
        for j in range(15):
            assert mat[i, j] == oracle_similarity(tags[i], tags[j], cfg)


class TestRankBySimilarity:
    def test_duplicate_and_disjoint(self):
        tags = {0: [1.0, 0.0], 1: [1.0, 0.0], 2: [0.0, 1.0]}
        r = rank_by_similarity(0, tags)
        assert r.entries == [(1, 1.0), (2, 0.0)]

    def test_identical_tracks_ascending_ids(self):
        tags = {i: [0.5, 0.5] for i in (7, 3, 9, 1)}
        r = rank_by_similarity(3, tags)
        assert r.ids.tolist() == [1, 7, 9]
        np.testing.assert_array_equal(r.scores, 1.0)

    def test_matches_brute_force_sort(self, rng):
        tags = {int(i): rng.uniform(size=5) * (rng.uniform(size=5) < 0.6) for i in rng.permutation(50)[:10]}
        for q in tags:
            pairs = [(-oracle_similarity(tags[q], tags[t]), t) for t in tags if t != q]
            expected = [t for _, t in sorted(pairs)]
            assert rank_by_similarity(q, tags).ids.tolist() == expected

    def test_unknown_query(self):
        with pytest.raises(KeyError):
            rank_by_similarity(99, {0: [1.0], 1: [0.5]})

    def test_corpus_too_small(self):
        with pytest.raises(ValueError):
            rank_by_similarity(0, {0: [1.0]})

    def test_rank_all_agrees(self, small_corpus, small_rankings):
        tags = small_corpus.tags_map()
        for q in list(tags)[:10]:
            r = rank_by_similarity(q, tags)
            np.testing.assert_array_equal(r.ids, small_rankings[q].ids)
            np.testing.assert_array_equal(r.scores, small_rankings[q].scores)

    @settings(max_examples=50)
    @given(st.integers(2, 20).flatmap(
        lambda n: arrays(float, (n, 4), elements=st.sampled_from([0.0, 0.25, 0.5, 1.0]))))
    def test_permutation_sorted_with_tiebreak(self, tags):
        corpus = {i: row for i, row in enumerate(tags)}
        for q, r in rank_all(corpus).items():
            assert sorted(r.ids.tolist()) == [i for i in corpus if i != q]
            for (i1, s1), (i2, s2) in zip(r.entries, r.entries[1:]):
                assert s1 > s2 or (s1 == s2 and i1 < i2)

    @given(st.floats(0.01, 100.0))
    @settings(max_examples=20)
    def test_weight_scaling_leaves_rankings(self, c):
        rng = np.random.default_rng(5)
        tags = {i: rng.uniform(size=6) * (rng.uniform(size=6) < 0.5) for i in range(12)}
        w = rng.uniform(0.5, 3.0, 6)
        r1 = rank_all(tags, OracleConfig(weights=tuple(w)))
        r2 = rank_all(tags, OracleConfig(weights=tuple(c * w)))
        for q in tags:
            np.testing.assert_array_equal(r1[q].ids, r2[q].ids)

    def test_rank_of(self):
        r = RankedList(0, np.array([4, 2, 9]), np.array([0.9, 0.5, 0.1]))
        assert r.rank_of(9) == 3
        with pytest.raises(KeyError):
            r.rank_of(0)


class TestSimilarityProfile:
    def test_identical_tracks_constant_one(self):
        tags = {i: [0.3, 0.8] for i in range(6)}
        np.testing.assert_array_equal(similarity_profile(rank_all(tags)), np.ones(5))

    def test_single_query(self, small_rankings):
        r = small_rankings[0]
        np.testing.assert_array_equal(similarity_profile([r]), r.scores)

    def test_matches_naive_mean(self, small_corpus):
        tags = small_corpus.tags_map()
        ids = sorted(tags)
        seqs = []
        for q in ids:
            seqs.append(sorted((oracle_similarity(tags[q], tags[t]) for t in ids if t != q), reverse=True))
        expected = [sum(col) / len(col) for col in zip(*seqs)]
        np.testing.assert_allclose(similarity_profile(rank_all(tags)), expected, rtol=0, atol=1e-14)

    def test_non_increasing(self, small_rankings):
        assert np.all(np.diff(similarity_profile(small_rankings)) <= 0)

    def test_empty(self):
        with pytest.raises(ValueError):
            similarity_profile({})
