"""Topic-coverage-aware demonstration retrieval for in-context learning."""

from .corpus import (
    CandidatePool,
    Demonstration,
    FormatError,
    TopicSet,
    ingest_zero_shot,
    load_embeddings,
    load_labels,
    load_pool,
    load_topics,
    save_embeddings,
    save_labels,
    save_topics,
    tokenize,
)
from .knowledge import TopicalKnowledge, estimate_knowledge
from .metrics import CoverageReport, run_ablation, topic_coverage, topic_redundancy
from .retrieval import RetrievalConfig, SelectionResult, relevance, retrieve_batch, select
from .services import HttpCoreTopicMatcher, MatcherEndpointConfig, StubCoreTopicMatcher
from .topic_identification import (
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
from .topic_predictor import PredictorParams, TrainConfig, forward, init_params, train

__version__ = "0.1.0"

__all__ = [
    "Bm25Params",
    "CandidatePool",
    "CoverageReport",
    "Demonstration",
    "FormatError",
    "HttpCoreTopicMatcher",
    "MatcherEndpointConfig",
    "MinerConfig",
    "PredictorParams",
    "RetrievalConfig",
    "SelectionResult",
    "StubCoreTopicMatcher",
    "TopicSet",
    "TopicalKnowledge",
    "TrainConfig",
    "bm25",
    "candidate_topics",
    "core_topics",
    "dst",
    "estimate_knowledge",
    "forward",
    "ingest_zero_shot",
    "init_params",
    "knn_neighbors",
    "label_pool",
    "load_embeddings",
    "load_labels",
    "load_pool",
    "load_topics",
    "mine_topics",
    "relevance",
    "retrieve_batch",
    "run_ablation",
    "save_embeddings",
    "save_labels",
    "save_topics",
    "select",
    "soft_labels",
    "tokenize",
    "topic_coverage",
    "topic_redundancy",
    "train",
]
