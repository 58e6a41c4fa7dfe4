"""Topic mining, per-demonstration topic matching, and soft labeling.

The labeling pipeline for each demonstration d:

1. candidate topics = top-10 lexical (Okapi BM25) plus top-10 semantic
   (cosine of sentence embeddings), lexical hits excluded from the
   semantic ranking;
2. a matcher (LLM endpoint or offline stub) filters the candidates into
   the core topic set, optionally admitting new topics;
3. each core topic gets a distinctiveness score
   ``DST(d,t) = exp(BM25(d,t)) / (1 + sum_{d' in N(d)} exp(BM25(d',t)))``
   over the 100 nearest neighbors of d in embedding space, normalized to
   a soft label with max exactly 1.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .corpus import CandidatePool, Demonstration, TopicSet, tokenize

logger = logging.getLogger(__name__)

KNN_NEIGHBORS = 100
LEXICAL_TOP = 10
SEMANTIC_TOP = 10


@dataclass
class Bm25Params:
    """Okapi BM25 constants. Defaults are the classic k1=1.2, b=0.75."""

    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.k1 <= 0:
            raise ValueError(f"k1 must be positive, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must be in [0, 1], got {self.b}")


@dataclass
class MinerConfig:
    max_ngram: int = 2
    min_doc_freq: int = 1
    max_doc_frac: float = 1.0
    max_topics: int = 500

    def __post_init__(self):
        if self.max_ngram not in (1, 2):
            raise ValueError(f"max_ngram must be 1 or 2, got {self.max_ngram}")
        if self.min_doc_freq < 1:
            raise ValueError(f"min_doc_freq must be >= 1, got {self.min_doc_freq}")
        if not 0.0 < self.max_doc_frac <= 1.0:
            raise ValueError(f"max_doc_frac must be in (0, 1], got {self.max_doc_frac}")
        if self.max_topics < 1:
            raise ValueError(f"max_topics must be >= 1, got {self.max_topics}")


def mine_topics(pool: CandidatePool, cfg: MinerConfig) -> TopicSet:
    """Mine a topic vocabulary of unigrams/bigrams ranked by TF-IDF mass.

    mass(t) = total_tf(t) * log(1 + N / df(t)), filtered by document
    frequency bounds. Ties break lexicographically. Returns names only;
    name embeddings are supplied separately.
    """
    docs = [tokenize(d.text) for d in pool.demonstrations]
    if not docs:
        raise ValueError("cannot mine topics from an empty corpus")
    n_docs = len(docs)

    total_tf: Counter = Counter()
    doc_freq: Counter = Counter()
    for tokens in docs:
        grams = list(tokens)
        if cfg.max_ngram >= 2:
            grams += [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
        counts = Counter(grams)
        total_tf.update(counts)
        doc_freq.update(counts.keys())

    if not total_tf:
        raise ValueError("cannot mine topics from an empty corpus")

    max_df = cfg.max_doc_frac * n_docs
    scored = []
    for term, df in doc_freq.items():
        if df < cfg.min_doc_freq or df > max_df:
            continue
        mass = total_tf[term] * math.log(1.0 + n_docs / df)
        scored.append((term, mass))
    scored.sort(key=lambda item: (-item[1], item[0]))
    names = [term for term, _ in scored[: cfg.max_topics]]
    return TopicSet(names)


def bm25(
    demo: Demonstration,
    topic: int,
    pool: CandidatePool,
    params: Bm25Params | None = None,
) -> float:
    """Okapi BM25 score of the topic's terms against the demonstration text.

    Multi-word topics sum per-term scores; terms absent from the
    demonstration contribute 0. Uses the non-negative idf variant
    ``ln(1 + (N - df + 0.5) / (df + 0.5))`` so a score of 0 means no
    lexical overlap at all.
    """
    params = params or Bm25Params()
    stats = pool.stats
    idx = pool.index_of_id(demo.id)
    tf = stats.term_freqs[idx]
    doc_len = float(stats.doc_lengths[idx])
    avg_len = stats.avg_doc_length or 1.0
    norm = params.k1 * (1.0 - params.b + params.b * doc_len / avg_len)

    score = 0.0
    for term in tokenize(pool.topics.names[topic]):
        freq = tf.get(term, 0)
        if freq == 0:
            continue
        df = stats.doc_freqs.get(term, 0)
        idf = math.log(1.0 + (stats.n_docs - df + 0.5) / (df + 0.5))
        score += idf * freq * (params.k1 + 1.0) / (freq + norm)
    return score


def candidate_topics(
    demo: Demonstration,
    pool: CandidatePool,
    params: Bm25Params | None = None,
) -> list[int]:
    """Candidate topic indices for a demonstration, lexical hits first.

    Top-10 topics by BM25 (nonzero scores only, ties to the lower index),
    then top-10 by cosine similarity drawn from the remaining topics.
    """
    n_topics = len(pool.topics)
    if n_topics == 0:
        return []

    scores = [(bm25(demo, t, pool, params), t) for t in range(n_topics)]
    lexical = [t for s, t in sorted(scores, key=lambda st: (-st[0], st[1])) if s > 0.0]
    lexical = lexical[:LEXICAL_TOP]
    taken = set(lexical)

    semantic: list[int] = []
    if pool.topics.name_embeddings is not None and len(pool.topics.name_embeddings):
        topic_embs = pool.topics.name_embeddings.astype(np.float64)
        e_d = pool.demo_embedding(demo).astype(np.float64)
        e_norm = np.linalg.norm(e_d)
        if e_norm > 0:
            row_norms = np.linalg.norm(topic_embs, axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                cosines = topic_embs @ e_d / (row_norms * e_norm)
        else:
            cosines = np.zeros(n_topics)
        usable = [
            (float(cosines[t]), t)
            for t in range(n_topics)
            if t not in taken and np.isfinite(cosines[t])
        ]
        usable.sort(key=lambda ct: (-ct[0], ct[1]))
        semantic = [t for _, t in usable[:SEMANTIC_TOP]]

    return lexical + semantic


def knn_neighbors(demo: Demonstration, pool: CandidatePool, n: int = KNN_NEIGHBORS) -> list[int]:
    """Indices of the n nearest demonstrations by cosine similarity.

    Excludes the demonstration itself; ties break toward the lower index.
    """
    embs = pool.embeddings.astype(np.float64)
    if len(embs) <= 1:
        return []
    norms = np.linalg.norm(embs, axis=1)
    norms[norms == 0] = 1.0
    e = embs[demo.embedding_index] / norms[demo.embedding_index]
    sims = (embs / norms[:, None]) @ e
    self_idx = pool.index_of_id(demo.id)
    sims[self_idx] = -np.inf
    order = np.lexsort((np.arange(len(sims)), -sims))
    return [int(i) for i in order[: min(n, len(embs) - 1)]]


def dst(
    demo: Demonstration,
    topic: int,
    pool: CandidatePool,
    params: Bm25Params | None = None,
    neighbors: list[int] | None = None,
) -> float:
    """Distinctiveness of a topic for a demonstration, in (0, 1].

    exp(BM25(d,t)) / (1 + sum over 100-NN of exp(BM25(d',t))), evaluated
    in log space with the "+1" folded in as exp(0) so large BM25 scores
    cannot overflow.
    """
    params = params or Bm25Params()
    if neighbors is None:
        neighbors = knn_neighbors(demo, pool)
    own = bm25(demo, topic, pool, params)
    terms = [0.0] + [bm25(pool.demonstrations[j], topic, pool, params) for j in neighbors]
    peak = max(terms)
    log_denom = peak + math.log(sum(math.exp(v - peak) for v in terms))
    return math.exp(own - log_denom)


def soft_labels(
    demo: Demonstration,
    pool: CandidatePool,
    params: Bm25Params | None = None,
    neighbors: list[int] | None = None,
) -> dict[int, float]:
    """Soft label over the core topic set: DST normalized to max exactly 1."""
    if not demo.core_topics:
        raise ValueError(f"demonstration {demo.id!r} has no core topics")
    if neighbors is None:
        neighbors = knn_neighbors(demo, pool)
    raw = {t: dst(demo, t, pool, params, neighbors) for t in sorted(demo.core_topics)}
    peak = max(raw.values())
    return {t: v / peak for t, v in raw.items()}


def core_topics(
    demo: Demonstration,
    candidates: list[int],
    pool: CandidatePool,
    matcher,
) -> set[int]:
    """Finalize the core topic set via the matcher.

    Matcher names are normalized and resolved against the vocabulary;
    unknown names are admitted as new topics (embedding pending). If the
    matcher yields nothing usable, fall back to the full candidate list.
    """
    if not candidates:
        raise ValueError(f"demonstration {demo.id!r} has no candidate topics")
    names = [pool.topics.names[t] for t in candidates]
    returned = matcher.match(demo.text, names)
    return resolve_core_names(demo, candidates, returned, pool)


def resolve_core_names(
    demo: Demonstration,
    candidates: list[int],
    returned_names: list[str],
    pool: CandidatePool,
) -> set[int]:
    result: set[int] = set()
    for name in returned_names:
        idx = pool.topics.index_of(name)
        if idx is None:
            stripped = name.strip()
            if not any(ch.isalnum() for ch in stripped):
                continue
            idx = pool.topics.add(stripped)
            logger.info("admitted new topic %r for demonstration %s", pool.topics.names[idx], demo.id)
        result.add(idx)
    if not result:
        logger.warning("matcher returned no usable topics for %s; keeping all candidates", demo.id)
        return set(candidates)
    return result


def label_pool(
    pool: CandidatePool,
    matcher,
    params: Bm25Params | None = None,
    threads: int = 1,
) -> None:
    """Run candidate matching, core-topic matching, and soft labeling
    for every demonstration, mutating the pool in place.

    Matcher calls may run concurrently (bounded by ``threads``); topic-set
    mutation and label assignment stay single-threaded so results are
    deterministic regardless of thread count.
    """
    params = params or Bm25Params()
    all_candidates = [candidate_topics(d, pool, params) for d in pool.demonstrations]
    for demo, cands in zip(pool.demonstrations, all_candidates):
        if not cands:
            raise ValueError(f"demonstration {demo.id!r} matched no candidate topics")

    def call(job):
        demo, cands = job
        return matcher.match(demo.text, [pool.topics.names[t] for t in cands])

    jobs = list(zip(pool.demonstrations, all_candidates))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            matched = list(pool_exec.map(call, jobs))
    else:
        matched = [call(job) for job in jobs]

    for demo, cands, names in zip(pool.demonstrations, all_candidates, matched):
        demo.core_topics = resolve_core_names(demo, cands, names, pool)

    for demo in pool.demonstrations:
        neighbors = knn_neighbors(demo, pool)
        demo.soft_label = soft_labels(demo, pool, params, neighbors)
