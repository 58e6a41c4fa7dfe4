"""Per-topic knowledge estimate of the target model.

Aggregates ingested zero-shot outcomes, weighted by predicted topic
coverage:

    knowledge[t] = sum_d coverage[d,t] * outcome[d] / sum_d coverage[d,t]

Sums run over demonstrations with a known outcome only. Topics nobody
covers fall back to the pool-wide mean outcome, and everything is floored
at eps so the relevance score's division stays bounded. The vector is
computed once per pool and reused across all test inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import (
    CandidatePool,
    load_embeddings,
    outcomes_fingerprint,
    pool_fingerprint,
    save_embeddings,
)
from .topic_predictor import PredictorParams, forward

DEFAULT_EPS = 0.05


@dataclass
class TopicalKnowledge:
    values: np.ndarray
    coverage_mass: np.ndarray
    floor: float

    def __len__(self) -> int:
        return len(self.values)


def aggregate_outcomes(
    coverage: np.ndarray,
    outcomes: np.ndarray,
    eps: float = DEFAULT_EPS,
) -> TopicalKnowledge:
    """Aggregate an (n_demos, n_topics) coverage matrix against outcomes.

    Zero-coverage topics (impossible for raw sigmoid outputs, but allowed
    for externally supplied weights) receive the global mean outcome.
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps must be in [0, 1), got {eps}")
    coverage = np.atleast_2d(np.asarray(coverage, dtype=np.float64))
    outcomes = np.asarray(outcomes, dtype=np.float64)
    if coverage.shape[0] != len(outcomes):
        raise ValueError(f"{coverage.shape[0]} coverage rows for {len(outcomes)} outcomes")
    if len(outcomes) == 0:
        raise ValueError("no demonstration has a known zero-shot outcome")

    mass = coverage.sum(axis=0)
    weighted = (coverage * outcomes[:, None]).sum(axis=0)
    global_mean = float(outcomes.mean())
    raw = np.where(mass > 0, weighted / np.where(mass > 0, mass, 1.0), global_mean)
    values = np.maximum(raw, eps)
    return TopicalKnowledge(values=values, coverage_mass=mass, floor=eps)


def estimate_knowledge(
    pool: CandidatePool,
    params: PredictorParams,
    eps: float = DEFAULT_EPS,
) -> TopicalKnowledge:
    """Weighted mean of {0,1} outcomes per topic, floored at eps."""
    known = [d for d in pool.demonstrations if d.zero_shot_correct is not None]
    if not known:
        raise ValueError("no demonstration has a known zero-shot outcome")
    embs = np.stack([pool.demo_embedding(d) for d in known]).astype(np.float64)
    coverage = forward(params, embs)
    outcomes = np.array([float(d.zero_shot_correct) for d in known])
    return aggregate_outcomes(coverage, outcomes, eps)


def save_knowledge(knowledge: TopicalKnowledge, path: str | Path, pool: CandidatePool) -> None:
    """Cache as a 1 x |T| embedding file plus a staleness sidecar."""
    save_embeddings(path, knowledge.values.reshape(1, -1))
    sidecar = {
        "eps": knowledge.floor,
        "pool_hash": pool_fingerprint(pool),
        "outcomes_hash": outcomes_fingerprint(pool),
        "n_topics": int(len(knowledge.values)),
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_knowledge(path: str | Path, pool: CandidatePool | None = None) -> TopicalKnowledge:
    """Load a cached knowledge vector.

    Passing the pool enables staleness detection: a cache computed against
    different demonstrations, embeddings, or topics is rejected.
    """
    data = load_embeddings(path)
    if data.shape[0] != 1:
        raise ValueError(f"{path}: knowledge cache must be a single row, got {data.shape}")
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    if pool is not None and sidecar.get("pool_hash") != pool_fingerprint(pool):
        raise ValueError(
            f"{path}: knowledge cache is stale for this pool; re-run the knowledge stage"
        )
    values = data[0].astype(np.float64)
    return TopicalKnowledge(values=values, coverage_mass=np.zeros_like(values), floor=float(sidecar["eps"]))
