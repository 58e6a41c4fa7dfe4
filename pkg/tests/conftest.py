"""Shared test fixtures: synthetic pools, the planted-cluster corpus,
and small deterministic corpora used by both unit and acceptance tests.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from topicover.corpus import (
    CandidatePool,
    Demonstration,
    TopicSet,
    compute_corpus_stats,
)
from topicover.topic_identification import Bm25Params

N_CLUSTERS = 4
TOPICS_PER_CLUSTER = 4
DEMOS_PER_CLUSTER = 10
CLUSTER_WORDS = [
    ["reef", "coral", "lagoon", "tide"],
    ["glacier", "tundra", "permafrost", "moraine"],
    ["magma", "basalt", "caldera", "obsidian"],
    ["nebula", "quasar", "pulsar", "redshift"],
]


def make_pool(
    texts,
    embeddings,
    topic_names=(),
    topic_embeddings=None,
    ids=None,
) -> CandidatePool:
    """Assemble an in-memory pool; texts may be strings or (input, output)."""
    demos = []
    for i, text in enumerate(texts):
        if isinstance(text, tuple):
            inp, out = text
        else:
            inp, out = text, ""
        demo_id = ids[i] if ids else f"d{i}"
        demos.append(Demonstration(demo_id, inp, out, embedding_index=i))
    embeddings = np.asarray(embeddings, dtype=np.float32)
    topics = TopicSet(list(topic_names), topic_embeddings)
    stats = compute_corpus_stats([d.text for d in demos])
    return CandidatePool(demos, embeddings, topics, stats)


class WordOverlapMatcher:
    """Test matcher: keep candidate names whose tokens all occur in the text."""

    def match(self, demo_text: str, candidate_names: list[str]) -> list[str]:
        from topicover.corpus import tokenize

        tokens = set(tokenize(demo_text))
        kept = [n for n in candidate_names if set(tokenize(n)) <= tokens]
        return kept or list(candidate_names)


class IdentityMatcher:
    """Test matcher: pass every candidate through unchanged."""

    def match(self, demo_text: str, candidate_names: list[str]) -> list[str]:
        return list(candidate_names)


def cluster_corpus(jitter=0.02, tilt=0.10, dim=20, seed=7):
    """Planted corpus: 4 disjoint topic clusters, 10 demos each, |T| = 16.

    Demo embeddings sit on orthogonal cluster axes with small jitter; the
    returned test embedding mixes all four clusters with a slight tilt
    toward cluster 0, so pure cosine ranking concentrates there.
    """
    rng = np.random.default_rng(seed)
    topic_names = [w for cluster in CLUSTER_WORDS for w in cluster]

    topic_embs = np.zeros((len(topic_names), dim), dtype=np.float32)
    for t in range(len(topic_names)):
        c = t // TOPICS_PER_CLUSTER
        vec = np.zeros(dim)
        vec[c] = 1.0
        vec[N_CLUSTERS + t] = 0.3
        topic_embs[t] = vec + jitter * rng.normal(size=dim)

    texts = []
    demo_embs = np.zeros((N_CLUSTERS * DEMOS_PER_CLUSTER, dim), dtype=np.float32)
    for c in range(N_CLUSTERS):
        for j in range(DEMOS_PER_CLUSTER):
            i = c * DEMOS_PER_CLUSTER + j
            words = CLUSTER_WORDS[c]
            primary = words[j % TOPICS_PER_CLUSTER]
            question = f"what explains {primary} and {primary} near the {' and the '.join(words)}"
            texts.append((question, f"it is the {primary}"))
            vec = np.zeros(dim)
            vec[c] = 1.0
            demo_embs[i] = vec + jitter * rng.normal(size=dim)

    pool = make_pool(texts, demo_embs, topic_names, topic_embs)
    x = np.zeros(dim, dtype=np.float64)
    x[:N_CLUSTERS] = 1.0
    x[0] += tilt
    return pool, x


def label_cluster_pool(pool):
    """Deterministic labels for the cluster corpus via word overlap."""
    from topicover.topic_identification import label_pool

    label_pool(pool, WordOverlapMatcher(), Bm25Params())


def cluster_predictor(dim=20, n_topics=16, gain=8.0, bias=-2.0):
    """Hand-built predictor for the cluster corpus.

    Identity hidden layers plus one output weight per cluster axis give a
    response that activates a cluster's topics from small mixture
    fractions upward (concave in the fraction), with no cross-cluster
    terms. That isolates the selection dynamics from training noise.
    """
    from topicover.topic_predictor import PredictorParams

    w3 = np.zeros((dim, n_topics))
    for t in range(n_topics):
        w3[t // TOPICS_PER_CLUSTER, t] = gain
    return PredictorParams(
        w1=np.eye(dim),
        b1=np.zeros(dim),
        w2=np.eye(dim),
        b2=np.zeros(dim),
        w3=w3,
        b3=np.full(n_topics, bias),
    )


def cluster_of(pool, demo_id):
    return pool.index_of_id(demo_id) // DEMOS_PER_CLUSTER


def generate_fixture(
    root,
    n_demos=50,
    dim=16,
    n_tests=5,
    seed=0,
    vocab_size=120,
    max_topics=40,
    epochs=5,
    batch_size=16,
    k=4,
    learning_rate=1e-4,
):
    """Write a complete file-based corpus plus pipeline config under root.

    Texts are drawn from a zipf-ish vocabulary; everything is a pure
    function of the seed so regeneration is byte-identical.
    """
    import json

    from topicover.corpus import save_embeddings

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    vocab = [f"term{i}" for i in range(vocab_size)]
    weights = 1.0 / np.arange(1, vocab_size + 1)
    weights /= weights.sum()

    with open(root / "demos.jsonl", "w", encoding="utf-8") as fh:
        for i in range(n_demos):
            n_words = int(rng.integers(6, 14))
            words = rng.choice(vocab, size=n_words, p=weights)
            fh.write(
                json.dumps(
                    {
                        "id": f"d{i:04d}",
                        "input": " ".join(words[:-2]),
                        "output": " ".join(words[-2:]),
                    }
                )
                + "\n"
            )
    save_embeddings(root / "embeddings.bin", rng.normal(size=(n_demos, dim)).astype(np.float32))

    with open(root / "zeroshot.jsonl", "w", encoding="utf-8") as fh:
        for i in range(n_demos):
            fh.write(json.dumps({"id": f"d{i:04d}", "correct": int(rng.integers(0, 2))}) + "\n")

    with open(root / "tests.jsonl", "w", encoding="utf-8") as fh:
        for i in range(n_tests):
            fh.write(json.dumps({"id": f"q{i:03d}"}) + "\n")
    save_embeddings(root / "test_embeddings.bin", rng.normal(size=(n_tests, dim)).astype(np.float32))

    config = {
        "paths": {
            "demos": "demos.jsonl",
            "embeddings": "embeddings.bin",
            "topics": "topics.jsonl",
            "topic_embeddings": "topic_embeddings.bin",
            "labels": "labels.jsonl",
            "labeled_topics": "labeled_topics.jsonl",
            "zeroshot": "zeroshot.jsonl",
            "params": "params.bin",
            "knowledge": "knowledge.bin",
            "tests": "tests.jsonl",
            "test_embeddings": "test_embeddings.bin",
            "selections": "selections.jsonl",
            "report": "report.csv",
            "eval_selections": "eval_selections.jsonl",
        },
        "miner": {"max_ngram": 2, "min_doc_freq": 1, "max_doc_frac": 0.9, "max_topics": max_topics},
        "train": {"learning_rate": learning_rate, "epochs": epochs, "batch_size": batch_size, "seed": seed},
        "retrieval": {"k": k, "lambda": 0.5, "prune_m": 300},
        "matcher": {"mode": "stub"},
        "metrics": {"top_r": 20, "top_c": 20},
    }
    with open(root / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2)
    return root / "config.json"


def write_topic_embeddings(root, dim=16):
    """Derive a deterministic name embedding per mined topic (hash-seeded)."""
    import hashlib
    import json

    from topicover.corpus import save_embeddings

    root = Path(root)
    names = []
    with open(root / "topics.jsonl", "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                names.append(json.loads(line)["name"])
    rows = np.zeros((len(names), dim), dtype=np.float32)
    for i, name in enumerate(names):
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        rows[i] = rng.normal(size=dim)
    save_embeddings(root / "topic_embeddings.bin", rows)


@pytest.fixture
def small_pool():
    """3 demos, 2 topics, 4-dim embeddings; enough for shape plumbing."""
    texts = [
        ("how do plants use photosynthesis", "with chlorophyll"),
        ("what keeps planets in orbit", "gravity holds them"),
        ("why do leaves look green", "photosynthesis pigments"),
    ]
    embs = np.array(
        [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.9, 0.1, 0.0, 0.0]],
        dtype=np.float32,
    )
    topic_embs = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]], dtype=np.float32)
    return make_pool(texts, embs, ["photosynthesis", "gravity"], topic_embs)
