"""Selection diagnostics: topic coverage, topic redundancy, ablations.

A demonstration "covers" a topic when the topic is among its top-C
predicted topics (C defaults to 20, mirroring the top-20 required-topic
cutoff). Coverage counts how many of the test input's top-R required
topics any selected demonstration covers; redundancy is the fraction of
the k-th demonstration's topics already covered by earlier picks.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .corpus import CandidatePool
from .knowledge import TopicalKnowledge, estimate_knowledge
from .retrieval import RetrievalConfig, SelectionResult, select
from .services import StubCoreTopicMatcher
from .topic_identification import (
    Bm25Params,
    bm25,
    candidate_topics,
    knn_neighbors,
    label_pool,
    soft_labels,
)
from .topic_predictor import PredictorParams, TrainConfig, forward, train

logger = logging.getLogger(__name__)

DEFAULT_TOP_R = 20
DEFAULT_TOP_C = 20

ABLATION_VARIANTS = ("full", "no_core_topic", "no_soft_label", "no_cumulative")


@dataclass
class CoverageEntry:
    k: int
    coverage: int
    redundancy: float | None


@dataclass
class CoverageReport:
    test_id: str
    entries: list[CoverageEntry]
    top_r: int = DEFAULT_TOP_R
    top_c: int = DEFAULT_TOP_C
    variant: str = "full"


def top_topics(distribution: np.ndarray, top_n: int) -> set[int]:
    """Indices of the top-n entries; ties break toward the lower index."""
    order = np.argsort(-np.asarray(distribution), kind="stable")
    return {int(t) for t in order[:top_n]}


def _demo_topic_sets(selected: list[int], params: PredictorParams, pool: CandidatePool, top_c: int):
    sets = []
    for idx in selected:
        dist = forward(params, pool.demo_embedding(pool.demonstrations[idx]).astype(np.float64))
        sets.append(top_topics(dist, top_c))
    return sets


def topic_coverage(
    selected: list[int],
    t_x: np.ndarray,
    params: PredictorParams,
    pool: CandidatePool,
    top_r: int = DEFAULT_TOP_R,
    top_c: int = DEFAULT_TOP_C,
) -> list[int]:
    """Covered required-topic counts per prefix length, index k = prefix k.

    Entry 0 is the empty prefix (always 0); counts are monotone
    non-decreasing and bounded by top_r.
    """
    required = top_topics(t_x, top_r)
    covered_sets = _demo_topic_sets(selected, params, pool, top_c)
    counts = [0]
    covered: set[int] = set()
    for topic_set in covered_sets:
        covered |= topic_set & required
        counts.append(len(covered))
    return counts


def topic_redundancy(
    selected: list[int],
    params: PredictorParams,
    pool: CandidatePool,
    top_c: int = DEFAULT_TOP_C,
) -> dict[int, float]:
    """Fraction of demo k's topics already covered by demos 1..k-1 (k >= 2)."""
    covered_sets = _demo_topic_sets(selected, params, pool, top_c)
    out: dict[int, float] = {}
    seen: set[int] = set()
    for k, topic_set in enumerate(covered_sets, start=1):
        if k >= 2 and topic_set:
            out[k] = len(topic_set & seen) / len(topic_set)
        seen |= topic_set
    return out


def coverage_report(
    test_id: str,
    selected: list[int],
    t_x: np.ndarray,
    params: PredictorParams,
    pool: CandidatePool,
    top_r: int = DEFAULT_TOP_R,
    top_c: int = DEFAULT_TOP_C,
    variant: str = "full",
) -> CoverageReport:
    counts = topic_coverage(selected, t_x, params, pool, top_r, top_c)
    redundancy = topic_redundancy(selected, params, pool, top_c)
    entries = [
        CoverageEntry(k=k, coverage=counts[k], redundancy=redundancy.get(k))
        for k in range(1, len(selected) + 1)
    ]
    return CoverageReport(test_id, entries, top_r, top_c, variant)


def write_coverage_csv(reports: list[CoverageReport], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["test_id", "k", "coverage", "redundancy", "variant"])
        for report in reports:
            for entry in report.entries:
                redundancy = "" if entry.redundancy is None else f"{entry.redundancy:.6f}"
                writer.writerow([report.test_id, entry.k, entry.coverage, redundancy, report.variant])


@dataclass
class AblationResult:
    variant: str
    reports: list[CoverageReport]
    selections: list[SelectionResult]
    params: PredictorParams
    knowledge: TopicalKnowledge


def _label_no_core_topic(pool: CandidatePool, bm25_params: Bm25Params) -> None:
    """Label with the lexical candidate set standing in for core topics."""
    for demo in pool.demonstrations:
        cands = candidate_topics(demo, pool, bm25_params)
        lexical = [t for t in cands if bm25(demo, t, pool, bm25_params) > 0.0]
        demo.core_topics = set(lexical) if lexical else set(cands)
        neighbors = knn_neighbors(demo, pool)
        demo.soft_label = soft_labels(demo, pool, bm25_params, neighbors)


def prepare_variant_pool(
    pool: CandidatePool,
    variant: str,
    bm25_params: Bm25Params | None = None,
    matcher=None,
) -> CandidatePool:
    """Labeled copy of the pool with the variant's labeling rule applied."""
    bm25_params = bm25_params or Bm25Params()
    work = CandidatePool(
        demonstrations=copy.deepcopy(pool.demonstrations),
        embeddings=pool.embeddings,
        topics=pool.topics,
        stats=pool.stats,
    )
    if variant == "no_core_topic":
        _label_no_core_topic(work, bm25_params)
    else:
        label_pool(work, matcher or StubCoreTopicMatcher(work, bm25_params), bm25_params)
    return work


def run_ablation(
    pool: CandidatePool,
    test_ids: list[str],
    test_embeddings: np.ndarray,
    variant: str,
    train_cfg: TrainConfig | None = None,
    retrieval_cfg: RetrievalConfig | None = None,
    bm25_params: Bm25Params | None = None,
    top_r: int = DEFAULT_TOP_R,
    top_c: int = DEFAULT_TOP_C,
    matcher=None,
    params: PredictorParams | None = None,
) -> AblationResult:
    """Evaluate one ablation variant end to end.

    With ``params=None`` the variant's label and train stages run here
    (on a copy, the caller's pool is untouched). A caller that already
    holds variant-consistent predictor params can pass them to skip
    straight to selection, which keeps full-vs-no_cumulative comparisons
    controlled. Zero-shot outcomes must be ingested either way.
    """
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {ABLATION_VARIANTS}")
    train_cfg = train_cfg or TrainConfig()
    retrieval_cfg = retrieval_cfg or RetrievalConfig()
    if not any(d.zero_shot_correct is not None for d in pool.demonstrations):
        raise ValueError("zero-shot outcomes must be ingested before running ablations")

    if params is None:
        work = prepare_variant_pool(pool, variant, bm25_params, matcher)
        params = train(work, train_cfg, use_soft_labels=(variant != "no_soft_label"))
    else:
        work = pool
    knowledge = estimate_knowledge(work, params, retrieval_cfg.eps)
    cfg = replace(retrieval_cfg, cumulative=(variant != "no_cumulative"))

    reports: list[CoverageReport] = []
    selections: list[SelectionResult] = []
    for test_id, emb in zip(test_ids, np.asarray(test_embeddings, dtype=np.float64)):
        result = select(emb, work, params, knowledge, cfg)
        result.test_id = test_id
        selections.append(result)
        indices = [work.index_of_id(demo_id) for demo_id in result.selected]
        t_x = forward(params, emb)
        reports.append(coverage_report(test_id, indices, t_x, params, work, top_r, top_c, variant))
    return AblationResult(variant, reports, selections, params, knowledge)
