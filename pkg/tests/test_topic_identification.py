"""Mining, BM25, candidate matching, distinctiveness, and soft labels,
checked against hand computations and independent scalar oracles."""

import math
from collections import Counter

import numpy as np
import pytest

from conftest import IdentityMatcher, make_pool
from topicover.corpus import tokenize
from topicover.topic_identification import (
    Bm25Params,
    MinerConfig,
    bm25,
    candidate_topics,
    core_topics,
    dst,
    knn_neighbors,
    label_pool,
    mine_topics,
    soft_labels,
)


# --- independent oracles ----------------------------------------------------

def oracle_bm25(doc_tokens, all_docs_tokens, query_terms, k1, b):
    """Okapi BM25 re-derived from raw token lists."""
    n = len(all_docs_tokens)
    avgdl = sum(len(d) for d in all_docs_tokens) / n
    tf = Counter(doc_tokens)
    score = 0.0
    for term in query_terms:
        f = tf[term]
        if f == 0:
            continue
        df = sum(1 for d in all_docs_tokens if term in d)
        idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
        score += idf * f * (k1 + 1) / (f + k1 * (1 - b + b * len(doc_tokens) / avgdl))
    return score


def oracle_dst(pool, demo_idx, topic_idx, neighbor_idxs, params):
    """Eq-style DST: direct exp ratio, no log-sum-exp."""
    docs = [tokenize(d.text) for d in pool.demonstrations]
    terms = tokenize(pool.topics.names[topic_idx])
    own = oracle_bm25(docs[demo_idx], docs, terms, params.k1, params.b)
    denom = 1.0 + sum(
        math.exp(oracle_bm25(docs[j], docs, terms, params.k1, params.b))
        for j in neighbor_idxs
    )
    return math.exp(own) / denom


def random_text_pool(n_demos, vocab, topic_names, seed, dim=8, words_per_demo=12):
    rng = np.random.default_rng(seed)
    texts = []
    for _ in range(n_demos):
        words = rng.choice(vocab, size=words_per_demo)
        texts.append(" ".join(words))
    embs = rng.normal(size=(n_demos, dim)).astype(np.float32)
    topic_embs = rng.normal(size=(len(topic_names), dim)).astype(np.float32)
    return make_pool(texts, embs, topic_names, topic_embs)


# --- miner ------------------------------------------------------------------

class TestMiner:
    def test_single_term_corpus(self):
        pool = make_pool(
            ["photosynthesis", "photosynthesis", "photosynthesis"],
            np.zeros((3, 2), dtype=np.float32),
        )
        topics = mine_topics(pool, MinerConfig(max_ngram=1, min_doc_freq=1, max_topics=10))
        assert topics.names == ["photosynthesis"]

    def test_max_doc_frac_excludes_ubiquitous_term(self):
        pool = make_pool(
            ["alpha beta", "alpha gamma", "alpha delta", "alpha beta"],
            np.zeros((4, 2), dtype=np.float32),
        )
        topics = mine_topics(pool, MinerConfig(max_ngram=1, max_doc_frac=0.5, max_topics=10))
        assert "alpha" not in topics.names
        assert "beta" in topics.names

    def test_planted_themes_outrank_filler(self):
        # 10 docs; 4 theme words appear 3x in their own docs, filler once everywhere.
        themes = ["volcano", "enzyme", "algebra", "sonnet"]
        texts = []
        for i in range(10):
            words = ["common", "shared"]
            if i < 8:
                theme = themes[i % 4]
                words += [theme] * 3
            texts.append(" ".join(words))
        pool = make_pool(texts, np.zeros((10, 2), dtype=np.float32))
        topics = mine_topics(pool, MinerConfig(max_ngram=1, max_topics=4))
        assert set(topics.names) == set(themes)

        # oracle: mass = total_tf * log(1 + N / df)
        def mass(term, tf_total, df):
            return tf_total * math.log(1 + 10 / df)

        assert mass("volcano", 6, 2) > mass("common", 10, 10)

    def test_bigrams_and_lexicographic_ties(self):
        pool = make_pool(["red car", "red car"], np.zeros((2, 2), dtype=np.float32))
        topics = mine_topics(pool, MinerConfig(max_ngram=2, max_topics=10))
        # all grams have tf=2, df=2: ties resolved lexicographically
        assert topics.names == ["car", "red", "red car"]

    def test_empty_corpus(self):
        pool = make_pool([], np.zeros((0, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="empty corpus"):
            mine_topics(pool, MinerConfig())

    def test_deterministic(self):
        vocab = np.array([f"w{i}" for i in range(30)])
        pool = random_text_pool(15, vocab, [], seed=3)
        cfg = MinerConfig(max_topics=20)
        assert mine_topics(pool, cfg).names == mine_topics(pool, cfg).names


# --- bm25 -------------------------------------------------------------------

class TestBm25:
    def test_absent_term_scores_zero(self, small_pool):
        d2 = small_pool.demonstrations[1]  # gravity demo, no photosynthesis
        assert bm25(d2, 0, small_pool) == 0.0

    def test_hand_computed_single_doc(self):
        pool = make_pool([("the reef is alive", "")], np.zeros((1, 2), dtype=np.float32), ["reef"])
        params = Bm25Params(k1=1.2, b=0.75)
        # N=1, df=1, tf=1, dl=avgdl: idf=ln(1+0.5/1.5), tf term = (1*2.2)/(1+1.2)=1
        expected = math.log(1 + 0.5 / 1.5)
        assert bm25(pool.demonstrations[0], 0, pool, params) == pytest.approx(expected, rel=1e-12)

    def test_k1_saturation_closed_form(self):
        pool = make_pool(
            [("reef reef reef water", ""), ("water water", "")],
            np.zeros((2, 2), dtype=np.float32),
            ["reef"],
        )
        demo = pool.demonstrations[0]
        docs = [tokenize(d.text) for d in pool.demonstrations]
        for k1 in (0.5, 1.2, 2.4):
            params = Bm25Params(k1=k1, b=0.75)
            expected = oracle_bm25(docs[0], docs, ["reef"], k1, 0.75)
            assert bm25(demo, 0, pool, params) == pytest.approx(expected, rel=1e-12)

    def test_multiword_topic_sums_terms(self):
        pool = make_pool(
            [("food chain in the sea", "")],
            np.zeros((1, 2), dtype=np.float32),
            ["food chain", "food", "chain"],
        )
        demo = pool.demonstrations[0]
        combined = bm25(demo, 0, pool)
        assert combined == pytest.approx(bm25(demo, 1, pool) + bm25(demo, 2, pool), rel=1e-12)

    def test_matches_oracle_on_random_pool(self):
        vocab = np.array([f"w{i}" for i in range(12)])
        names = ["w0", "w1 w2", "w5"]
        pool = random_text_pool(8, vocab, names, seed=11)
        docs = [tokenize(d.text) for d in pool.demonstrations]
        params = Bm25Params()
        for i, demo in enumerate(pool.demonstrations):
            for t, name in enumerate(names):
                expected = oracle_bm25(docs[i], docs, tokenize(name), params.k1, params.b)
                assert bm25(demo, t, pool, params) == pytest.approx(expected, abs=1e-12)


# --- candidate topics ---------------------------------------------------------

class TestCandidateTopics:
    def test_small_vocabulary_no_duplicates(self, small_pool):
        result = candidate_topics(small_pool.demonstrations[0], small_pool)
        assert len(result) == len(set(result))
        assert len(result) <= 5
        assert set(result) <= {0, 1}

    def test_lexical_winner_not_repeated_in_semantic(self):
        # topic 0 overlaps lexically AND is nearest by cosine: appears once, first.
        texts = [("the reef is bright", "")]
        embs = np.array([[1.0, 0.0]], dtype=np.float32)
        topic_embs = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]], dtype=np.float32)
        pool = make_pool(texts, embs, ["reef", "ocean", "desert"], topic_embs)
        result = candidate_topics(pool.demonstrations[0], pool)
        assert result[0] == 0
        assert result.count(0) == 1

    def test_lexical_and_semantic_halves(self):
        # topic A shares tokens with the demo; topic B is only embedding-near.
        texts = [("the reef is bright", "")]
        embs = np.array([[0.0, 1.0, 0.0]], dtype=np.float32)
        topic_embs = np.array(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.1, 1.0]], dtype=np.float32
        )
        pool = make_pool(texts, embs, ["reef", "lagoon", "crystal"], topic_embs)
        result = candidate_topics(pool.demonstrations[0], pool)
        # lexical half: reef only (others score 0); semantic half ranked by cosine
        assert result[0] == 0
        sem = result[1:]
        cos_lagoon = 1.0
        cos_crystal = 0.1 / math.sqrt(1.01)
        assert cos_lagoon > cos_crystal
        assert sem == [1, 2]

    def test_zero_bm25_not_padded(self):
        texts = [("nothing matches here", "")]
        embs = np.array([[1.0, 0.0]], dtype=np.float32)
        topic_embs = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
        pool = make_pool(texts, embs, ["reef", "lagoon"], topic_embs)
        result = candidate_topics(pool.demonstrations[0], pool)
        # no lexical hits at all: both topics arrive via the semantic half
        assert result == [0, 1]

    def test_caps_at_twenty(self):
        vocab = np.array([f"w{i}" for i in range(40)])
        names = [f"w{i}" for i in range(30)]
        pool = random_text_pool(6, vocab, names, seed=5, words_per_demo=25)
        for demo in pool.demonstrations:
            result = candidate_topics(demo, pool)
            assert len(result) <= 20
            assert len(result) == len(set(result))


# --- core topics --------------------------------------------------------------

class TestCoreTopics:
    def test_identity_stub(self, small_pool):
        demo = small_pool.demonstrations[0]
        cands = candidate_topics(demo, small_pool)
        result = core_topics(demo, cands, small_pool, IdentityMatcher())
        assert result == set(cands)

    def test_new_topic_admitted(self, small_pool):
        class EcosystemMatcher:
            def match(self, text, names):
                return ["ecosystem"]

        demo = small_pool.demonstrations[0]
        n_before = len(small_pool.topics)
        result = core_topics(demo, [0, 1], small_pool, EcosystemMatcher())
        assert len(small_pool.topics) == n_before + 1
        new_idx = small_pool.topics.index_of("ecosystem")
        assert result == {new_idx}
        assert "ecosystem" in small_pool.topics.missing_embeddings()

    def test_case_and_space_variants_normalize(self, small_pool):
        class MessyMatcher:
            def match(self, text, names):
                return ["  Photosynthesis ", "GRAVITY", "photosynthesis"]

        demo = small_pool.demonstrations[0]
        n_before = len(small_pool.topics)
        result = core_topics(demo, [0, 1], small_pool, MessyMatcher())
        assert result == {0, 1}
        assert len(small_pool.topics) == n_before

    def test_zero_usable_names_falls_back(self, small_pool):
        class UselessMatcher:
            def match(self, text, names):
                return ["", "   ", "!!!"]

        demo = small_pool.demonstrations[0]
        result = core_topics(demo, [0, 1], small_pool, UselessMatcher())
        assert result == {0, 1}


# --- knn ----------------------------------------------------------------------

class TestKnn:
    def test_small_pool_returns_all_others(self, small_pool):
        assert len(knn_neighbors(small_pool.demonstrations[0], small_pool, n=100)) == 2

    def test_exact_duplicate_is_first(self):
        embs = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], dtype=np.float32)
        pool = make_pool(["a", "b", "a"], embs)
        neighbors = knn_neighbors(pool.demonstrations[0], pool, n=2)
        assert neighbors[0] == 2

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(21)
        embs = rng.normal(size=(50, 6)).astype(np.float32)
        pool = make_pool([f"text {i}" for i in range(50)], embs)
        for i in (0, 7, 49):
            got = knn_neighbors(pool.demonstrations[i], pool, n=10)
            sims = []
            e = embs[i].astype(np.float64)
            e = e / np.linalg.norm(e)
            for j in range(50):
                if j == i:
                    continue
                v = embs[j].astype(np.float64)
                sims.append((-float(v @ e / np.linalg.norm(v)), j))
            expected = [j for _, j in sorted(sims)[:10]]
            assert got == expected


# --- dst / soft labels ----------------------------------------------------------

class TestDst:
    def test_singleton_pool_is_one(self):
        pool = make_pool([("nothing here", "")], np.zeros((1, 2), dtype=np.float32), ["reef"])
        assert dst(pool.demonstrations[0], 0, pool) == 1.0

    def test_two_zero_neighbors_is_one_third(self):
        pool = make_pool(
            [("alpha", ""), ("beta", ""), ("gamma", "")],
            np.eye(3, 3, dtype=np.float32),
            ["reef"],
        )
        value = dst(pool.demonstrations[0], 0, pool)
        assert value == pytest.approx(1.0 / 3.0, rel=1e-12)

    def test_matches_brute_force_on_synthetic_pool(self):
        texts = [
            ("reef coral reef", ""),
            ("coral water", ""),
            ("reef water water", ""),
            ("sand dune", ""),
            ("coral coral coral", ""),
        ]
        embs = np.random.default_rng(3).normal(size=(5, 4)).astype(np.float32)
        pool = make_pool(texts, embs, ["reef", "coral", "sand"])
        params = Bm25Params()
        for i, demo in enumerate(pool.demonstrations):
            neighbors = knn_neighbors(demo, pool)
            for t in range(3):
                got = dst(demo, t, pool, params, neighbors)
                expected = oracle_dst(pool, i, t, neighbors, params)
                assert got == pytest.approx(expected, abs=1e-12)
                assert 0.0 < got <= 1.0

    def test_monotone_in_neighbor_overlap(self):
        # more neighbor occurrences of the topic term => lower distinctiveness
        lo = make_pool(
            [("reef", ""), ("water", "")], np.eye(2, 2, dtype=np.float32), ["reef"]
        )
        hi = make_pool(
            [("reef", ""), ("reef water", "")], np.eye(2, 2, dtype=np.float32), ["reef"]
        )
        assert dst(hi.demonstrations[0], 0, hi) < dst(lo.demonstrations[0], 0, lo)


class TestSoftLabels:
    def test_single_topic_label_is_one(self):
        pool = make_pool([("reef", ""), ("water", "")], np.eye(2, 2, dtype=np.float32), ["reef"])
        pool.demonstrations[0].core_topics = {0}
        assert soft_labels(pool.demonstrations[0], pool) == {0: 1.0}

    def test_normalization_by_max(self):
        pool = make_pool(
            [("reef reef coral", ""), ("coral coral", ""), ("water", "")],
            np.eye(3, 3, dtype=np.float32),
            ["reef", "coral"],
        )
        demo = pool.demonstrations[0]
        demo.core_topics = {0, 1}
        neighbors = knn_neighbors(demo, pool)
        raw = {t: dst(demo, t, pool, neighbors=neighbors) for t in (0, 1)}
        labels = soft_labels(demo, pool, neighbors=neighbors)
        peak = max(raw.values())
        for t in (0, 1):
            assert labels[t] == pytest.approx(raw[t] / peak, rel=1e-15)
        assert max(labels.values()) == 1.0

    def test_full_pipeline_max_is_exactly_one(self):
        vocab = np.array([f"w{i}" for i in range(25)])
        names = [f"w{i}" for i in range(12)]
        pool = random_text_pool(20, vocab, names, seed=17, words_per_demo=10)
        label_pool(pool, IdentityMatcher())
        for demo in pool.demonstrations:
            assert demo.core_topics
            assert set(demo.soft_label) == demo.core_topics
            assert max(demo.soft_label.values()) == 1.0
            assert all(0.0 < v <= 1.0 for v in demo.soft_label.values())

    def test_requires_core_topics(self, small_pool):
        with pytest.raises(ValueError, match="no core topics"):
            soft_labels(small_pool.demonstrations[0], small_pool)
