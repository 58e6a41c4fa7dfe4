"""K-shot demonstration selection with knowledge-weighted topic coverage.

Relevance between a test input and a candidate is

    r(x, d) = sum_t required[t] * covered[t] / knowledge[t]

blended with semantic similarity as z(r) + lambda * z(cos), both z-scored
over the candidate set. Selection is iterative: after each pick the
covered-topic vector of every remaining candidate is replaced by its
marginal contribution (set coverage with the candidate minus without,
via mean-pooled embeddings), so redundant candidates are discounted and
may go negative. After the first pick only the top-M candidates of the
first iteration are kept.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import CandidatePool
from .knowledge import TopicalKnowledge
from .topic_predictor import PredictorParams, forward

logger = logging.getLogger(__name__)


@dataclass
class RetrievalConfig:
    k: int = 8
    lam: float = 0.5
    prune_m: int = 300
    eps: float = 0.05
    allow_negative_coverage: bool = True
    cumulative: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.prune_m < self.k:
            raise ValueError(f"prune_m ({self.prune_m}) must be >= k ({self.k})")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class SelectionStep:
    demo_id: str
    relevance: float
    score: float
    coverage_gain_positive: int
    coverage_gain_negative: int
    top_topics: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class SelectionResult:
    selected: list[str]
    per_step: list[SelectionStep]
    test_id: str = ""

    @property
    def scores(self) -> list[float]:
        return [step.score for step in self.per_step]


def _knowledge_values(t_lm) -> np.ndarray:
    values = t_lm.values if isinstance(t_lm, TopicalKnowledge) else np.asarray(t_lm, dtype=np.float64)
    return np.asarray(values, dtype=np.float64)


def relevance(t_x: np.ndarray, t_d: np.ndarray, t_lm) -> float:
    """Knowledge-weighted inner product of required and covered topics."""
    t_x = np.asarray(t_x, dtype=np.float64)
    t_d = np.asarray(t_d, dtype=np.float64)
    lm = _knowledge_values(t_lm)
    if not (len(t_x) == len(t_d) == len(lm)):
        raise ValueError(f"length mismatch: {len(t_x)}, {len(t_d)}, {len(lm)}")
    return float((t_x / lm) @ t_d)


def zscore(values: np.ndarray) -> np.ndarray:
    """Z-score with the degenerate all-equal case mapped to zeros."""
    values = np.asarray(values, dtype=np.float64)
    std = values.std()
    if std == 0.0:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def cosine_to(query: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64)
    matrix = np.asarray(matrix, dtype=np.float64)
    q_norm = np.linalg.norm(query)
    row_norms = np.linalg.norm(matrix, axis=1)
    denom = np.where(row_norms > 0, row_norms, 1.0) * (q_norm if q_norm > 0 else 1.0)
    sims = matrix @ query / denom
    if q_norm == 0:
        sims[:] = 0.0
    sims[row_norms == 0] = 0.0
    return sims


def final_scores(
    x_embedding: np.ndarray,
    t_x: np.ndarray,
    candidate_indices: list[int],
    pool: CandidatePool,
    params: PredictorParams,
    t_lm,
    lam: float,
    demo_topics: np.ndarray | None = None,
) -> np.ndarray:
    """z(r) + lambda * z(cos) over the given candidate subset."""
    if not candidate_indices:
        raise ValueError("final_scores requires at least one candidate")
    idx = np.asarray(candidate_indices)
    embs = pool.embeddings.astype(np.float64)[
        [pool.demonstrations[i].embedding_index for i in candidate_indices]
    ]
    if demo_topics is None:
        demo_topics = forward(params, embs)
    else:
        demo_topics = np.asarray(demo_topics, dtype=np.float64)[idx]
    lm = _knowledge_values(t_lm)
    weights = np.asarray(t_x, dtype=np.float64) / lm
    rel = demo_topics @ weights
    cos = cosine_to(np.asarray(x_embedding, dtype=np.float64), embs)
    return zscore(rel) + lam * zscore(cos)


def cumulative_coverage(
    demo_index: int,
    selected: list[int],
    pool: CandidatePool,
    params: PredictorParams,
    clamp_negative: bool = False,
) -> np.ndarray:
    """Marginal topic coverage of adding one demonstration to a selection.

    f(mean embedding of selection + candidate) - f(mean embedding of
    selection); with an empty selection this is exactly the candidate's
    own topic distribution (empty-set coverage is the zero vector).
    """
    e_d = pool.demo_embedding(pool.demonstrations[demo_index]).astype(np.float64)
    if not selected:
        return forward(params, e_d)
    sel_embs = np.stack(
        [pool.demo_embedding(pool.demonstrations[i]) for i in selected]
    ).astype(np.float64)
    base = forward(params, sel_embs.mean(axis=0))
    pooled = (e_d + sel_embs.sum(axis=0)) / (1 + len(selected))
    gain = forward(params, pooled) - base
    if clamp_negative:
        gain = np.maximum(gain, 0.0)
    return gain


def _step_record(demo_id, rel, score, coverage_vec, weights, explain_top) -> SelectionStep:
    top: list[tuple[int, float]] = []
    if explain_top > 0:
        summands = weights * coverage_vec
        order = np.argsort(-summands, kind="stable")[:explain_top]
        top = [(int(t), float(summands[t])) for t in order]
    return SelectionStep(
        demo_id=demo_id,
        relevance=float(rel),
        score=float(score),
        coverage_gain_positive=int((coverage_vec > 0).sum()),
        coverage_gain_negative=int((coverage_vec < 0).sum()),
        top_topics=top,
    )


def select(
    x_embedding: np.ndarray,
    pool: CandidatePool,
    params: PredictorParams,
    t_lm,
    cfg: RetrievalConfig,
    demo_topics: np.ndarray | None = None,
    explain_top: int = 0,
) -> SelectionResult:
    """Iteratively select K demonstrations for one test input.

    Iteration 1 scores every candidate with its raw topic distribution,
    commits the argmax, then keeps only the top prune_m candidates of that
    ranking. Later iterations rescore the remainder with marginal coverage
    and a fresh z over remaining candidates; the cosine z-scores stay
    frozen from iteration 1. Ties always break to the lower index.
    """
    n = len(pool.demonstrations)
    if n == 0:
        raise ValueError("candidate pool is empty")
    if cfg.k > n:
        raise ValueError(f"cannot select k={cfg.k} demonstrations from a pool of {n}")

    x = np.asarray(x_embedding, dtype=np.float64)
    embs = pool.embeddings.astype(np.float64)[
        [d.embedding_index for d in pool.demonstrations]
    ]
    lm = _knowledge_values(t_lm)
    t_x = forward(params, x)
    weights = t_x / lm

    if demo_topics is None:
        demo_topics = forward(params, embs)
    else:
        demo_topics = np.asarray(demo_topics, dtype=np.float64)

    rel1 = demo_topics @ weights
    cos = cosine_to(x, embs)
    zcos = zscore(cos)
    scores1 = zscore(rel1) + cfg.lam * zcos

    first = int(np.argmax(scores1))
    steps = [
        _step_record(
            pool.demonstrations[first].id,
            rel1[first],
            scores1[first],
            demo_topics[first],
            weights,
            explain_top,
        )
    ]
    selected = [first]

    pruned_order = np.lexsort((np.arange(n), -scores1))[: cfg.prune_m]
    remaining = sorted(int(i) for i in pruned_order if int(i) != first)

    sum_sel = embs[first].copy()
    while len(selected) < cfg.k and remaining:
        rem = np.asarray(remaining)
        if cfg.cumulative:
            base = forward(params, sum_sel / len(selected))
            pooled = (embs[rem] + sum_sel) / (len(selected) + 1)
            coverage = forward(params, pooled) - base
            if not cfg.allow_negative_coverage:
                coverage = np.maximum(coverage, 0.0)
        else:
            coverage = demo_topics[rem]
        rel = coverage @ weights
        scores = zscore(rel) + cfg.lam * zcos[rem]
        pos = int(np.argmax(scores))
        pick = remaining[pos]
        steps.append(
            _step_record(
                pool.demonstrations[pick].id,
                rel[pos],
                scores[pos],
                coverage[pos],
                weights,
                explain_top,
            )
        )
        selected.append(pick)
        sum_sel += embs[pick]
        remaining.pop(pos)

    return SelectionResult(
        selected=[pool.demonstrations[i].id for i in selected],
        per_step=steps,
    )


def retrieve_batch(
    test_ids: list[str],
    test_embeddings: np.ndarray,
    pool: CandidatePool,
    params: PredictorParams,
    t_lm,
    cfg: RetrievalConfig,
    explain_top: int = 0,
    threads: int = 1,
) -> list[SelectionResult]:
    """Independent selection per test input, order-preserving.

    The candidate topic matrix is computed once and shared. Inputs may be
    processed by a thread pool (results land by index, so the output is
    identical for any thread count); a failure on one input aborts the
    batch with the offending id in the message.
    """
    if len(test_ids) != len(test_embeddings):
        raise ValueError(f"{len(test_ids)} ids for {len(test_embeddings)} embeddings")
    embs = pool.embeddings.astype(np.float64)[
        [d.embedding_index for d in pool.demonstrations]
    ]
    demo_topics = forward(params, embs)

    def one(job):
        test_id, emb = job
        try:
            result = select(emb, pool, params, t_lm, cfg, demo_topics, explain_top)
        except Exception as exc:
            raise RuntimeError(f"selection failed for test input {test_id!r}: {exc}") from exc
        result.test_id = test_id
        return result

    jobs = list(zip(test_ids, test_embeddings))
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            return list(pool_exec.map(one, jobs))
    return [one(job) for job in jobs]
