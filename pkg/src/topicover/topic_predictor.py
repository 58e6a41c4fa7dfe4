"""Three-layer MLP mapping sentence embeddings to topic distributions.

Forward/backward passes are explicit numpy so gradients stay verifiable
against finite differences. The output layer is initialized from the
topic-name embeddings; training minimizes a binary cross-entropy whose
positive terms are weighted by the distinctiveness-aware soft labels:

    L = - sum_d ( sum_{t in T_d} w_{d,t} * log y_{d,t}
                  + sum_{t not in T_d} log(1 - y_{d,t}) )

Negatives run over the whole vocabulary by default; optional uniform
subsampling rescales the negative term by |T \\ T_d| / sample size.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import CandidatePool, TopicSet

logger = logging.getLogger(__name__)

PARAMS_MAGIC = b"TPKPRM01"
LOGIT_CLAMP = 30.0

Batch = list[tuple[np.ndarray, dict[int, float], set[int]]]


@dataclass
class PredictorParams:
    """Weights and biases; w3 columns start as topic-name embeddings."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def n_topics(self) -> int:
        return self.w3.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2, "w3": self.w3, "b3": self.b3}

    def copy(self) -> "PredictorParams":
        return PredictorParams(**{k: v.copy() for k, v in self.tensors().items()})


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    negative_subsample: int | None = None
    hidden_dim: int | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.negative_subsample is not None and self.negative_subsample < 1:
            raise ValueError("negative_subsample must be >= 1 when set")


def init_params(topics: TopicSet, input_dim: int, hidden_dim: int | None = None, seed: int = 0) -> PredictorParams:
    """Initialize the network; deterministic given the seed.

    w3 column j is topic j's name embedding truncated or zero-padded to
    the hidden width (an exact copy when hidden_dim == input embedding
    dim). Hidden layers use symmetric uniform init scaled by fan-in.
    """
    hidden_dim = hidden_dim or input_dim
    n_topics = len(topics)
    missing = topics.missing_embeddings()
    if missing:
        raise ValueError(
            "topics lack name embeddings required for output-layer init: "
            + ", ".join(repr(m) for m in missing[:5])
            + ("..." if len(missing) > 5 else "")
        )
    name_embs = np.asarray(topics.name_embeddings, dtype=np.float64)

    rng = np.random.default_rng(seed)
    w1 = rng.uniform(-1.0, 1.0, size=(input_dim, hidden_dim)) / np.sqrt(input_dim)
    w2 = rng.uniform(-1.0, 1.0, size=(hidden_dim, hidden_dim)) / np.sqrt(hidden_dim)
    w3 = np.zeros((hidden_dim, n_topics))
    if n_topics:
        copy_dim = min(hidden_dim, name_embs.shape[1])
        w3[:copy_dim, :] = name_embs[:, :copy_dim].T
    return PredictorParams(
        w1=w1,
        b1=np.zeros(hidden_dim),
        w2=w2,
        b2=np.zeros(hidden_dim),
        w3=w3,
        b3=np.zeros(n_topics),
    )


def _forward_full(params: PredictorParams, embeddings: np.ndarray):
    """Forward pass keeping intermediates for backprop.

    Logits are clamped to +-30 before the sigmoid so log terms stay finite.
    """
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if e.shape[1] != params.input_dim:
        raise ValueError(f"embedding dim {e.shape[1]} != predictor input dim {params.input_dim}")
    h1 = np.tanh(e @ params.w1 + params.b1)
    h2 = np.tanh(h1 @ params.w2 + params.b2)
    logits = h2 @ params.w3 + params.b3
    clamped = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    y = 1.0 / (1.0 + np.exp(-clamped))
    return e, h1, h2, logits, y


def forward(params: PredictorParams, embedding: np.ndarray) -> np.ndarray:
    """Topic distribution for one embedding (1-D) or a batch (2-D).

    Every output entry is strictly inside (0, 1).
    """
    single = np.asarray(embedding).ndim == 1
    y = _forward_full(params, embedding)[4]
    return y[0] if single else y


def _batch_arrays(params: PredictorParams, batch: Batch, use_soft_labels: bool):
    n_topics = params.n_topics
    embs = np.stack([np.asarray(e, dtype=np.float64) for e, _, _ in batch])
    weights = np.zeros((len(batch), n_topics))
    pos_mask = np.zeros((len(batch), n_topics), dtype=bool)
    for i, (_, soft, core) in enumerate(batch):
        for t in core:
            pos_mask[i, t] = True
            weights[i, t] = 1.0 if not use_soft_labels else soft.get(t, 1.0)
    return embs, weights, pos_mask


def _negative_sampling(pos_mask: np.ndarray, subsample: int | None, rng: np.random.Generator | None):
    """Negative mask and per-row scale. Full complement unless subsampled."""
    neg_mask = ~pos_mask
    scale = np.ones(pos_mask.shape[0])
    if subsample is None:
        return neg_mask, scale
    if rng is None:
        rng = np.random.default_rng(0)
    sampled = np.zeros_like(pos_mask)
    for i in range(pos_mask.shape[0]):
        negatives = np.nonzero(neg_mask[i])[0]
        if len(negatives) <= subsample:
            sampled[i, negatives] = True
            continue
        chosen = rng.choice(negatives, size=subsample, replace=False)
        sampled[i, chosen] = True
        scale[i] = len(negatives) / subsample
    return sampled, scale


def loss(
    params: PredictorParams,
    batch: Batch,
    use_soft_labels: bool = True,
    negative_subsample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Binary cross-entropy over the batch (summed, not averaged)."""
    if not batch:
        raise ValueError("loss requires a non-empty batch")
    embs, weights, pos_mask = _batch_arrays(params, batch, use_soft_labels)
    y = _forward_full(params, embs)[4]
    neg_mask, scale = _negative_sampling(pos_mask, negative_subsample, rng)
    pos_term = (weights * np.log(y) * pos_mask).sum(axis=1)
    neg_term = (np.log1p(-y) * neg_mask).sum(axis=1) * scale
    return float(-(pos_term + neg_term).sum())


def loss_and_grad(
    params: PredictorParams,
    batch: Batch,
    use_soft_labels: bool = True,
    negative_subsample: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus exact analytic gradients for every parameter tensor."""
    if not batch:
        raise ValueError("gradient requires a non-empty batch")
    embs, weights, pos_mask = _batch_arrays(params, batch, use_soft_labels)
    e, h1, h2, logits, y = _forward_full(params, embs)
    neg_mask, scale = _negative_sampling(pos_mask, negative_subsample, rng)

    pos_term = (weights * np.log(y) * pos_mask).sum(axis=1)
    neg_term = (np.log1p(-y) * neg_mask).sum(axis=1) * scale
    total = float(-(pos_term + neg_term).sum())

    # dL/dlogit: w*(y-1) on positives, scale*y on sampled negatives;
    # zero wherever the clamp saturated.
    g = weights * (y - 1.0) * pos_mask + y * neg_mask * scale[:, None]
    g = g * (np.abs(logits) < LOGIT_CLAMP)

    dw3 = h2.T @ g
    db3 = g.sum(axis=0)
    dh2 = g @ params.w3.T
    dz2 = dh2 * (1.0 - h2 * h2)
    dw2 = h1.T @ dz2
    db2 = dz2.sum(axis=0)
    dh1 = dz2 @ params.w2.T
    dz1 = dh1 * (1.0 - h1 * h1)
    dw1 = e.T @ dz1
    db1 = dz1.sum(axis=0)
    grads = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2, "w3": dw3, "b3": db3}
    return total, grads


def grad(
    params: PredictorParams,
    batch: Batch,
    use_soft_labels: bool = True,
    negative_subsample: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, np.ndarray]:
    return loss_and_grad(params, batch, use_soft_labels, negative_subsample, rng)[1]


def _pool_batch(pool: CandidatePool) -> Batch:
    batch: Batch = []
    for demo in pool.demonstrations:
        if not demo.core_topics or not demo.soft_label:
            raise ValueError(f"demonstration {demo.id!r} is unlabeled; run the labeling stage first")
        batch.append((pool.demo_embedding(demo).astype(np.float64), demo.soft_label, demo.core_topics))
    return batch


def train(
    pool: CandidatePool,
    cfg: TrainConfig,
    use_soft_labels: bool = True,
) -> PredictorParams:
    """Train the predictor with Adam over shuffled mini-batches.

    Deterministic given (pool, cfg): one RNG seeded from cfg.seed drives
    initialization order, epoch shuffles, and negative subsampling.
    """
    data = _pool_batch(pool)
    input_dim = pool.embeddings.shape[1]
    params = init_params(pool.topics, input_dim, cfg.hidden_dim, seed=cfg.seed)
    if cfg.epochs == 0:
        return params

    rng = np.random.default_rng(cfg.seed)
    m = {k: np.zeros_like(v) for k, v in params.tensors().items()}
    v = {k: np.zeros_like(t) for k, t in params.tensors().items()}
    step = 0
    epoch_loss = float("nan")
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        epoch_loss = 0.0
        for start in range(0, len(data), cfg.batch_size):
            batch = [data[i] for i in order[start : start + cfg.batch_size]]
            batch_loss, grads = loss_and_grad(
                params, batch, use_soft_labels, cfg.negative_subsample, rng
            )
            epoch_loss += batch_loss
            step += 1
            tensors = params.tensors()
            for key, g in grads.items():
                m[key] = cfg.beta1 * m[key] + (1.0 - cfg.beta1) * g
                v[key] = cfg.beta2 * v[key] + (1.0 - cfg.beta2) * g * g
                m_hat = m[key] / (1.0 - cfg.beta1**step)
                v_hat = v[key] / (1.0 - cfg.beta2**step)
                tensors[key] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        logger.debug("epoch %d loss %.6f", epoch + 1, epoch_loss)
    logger.info("training finished: %d epochs, final loss %.6f", cfg.epochs, epoch_loss)
    return params


# ---------------------------------------------------------------------------
# Serialization: binary tensors + JSON sidecar
# ---------------------------------------------------------------------------

_TENSOR_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3")


def save_params(
    params: PredictorParams,
    path: str | Path,
    train_config: TrainConfig | None = None,
    final_loss: float | None = None,
) -> None:
    chunks = [PARAMS_MAGIC, struct.pack("<III", params.input_dim, params.hidden_dim, params.n_topics)]
    for key in _TENSOR_ORDER:
        tensor = np.atleast_2d(params.tensors()[key]).astype("<f8")
        chunks.append(struct.pack("<II", tensor.shape[0], tensor.shape[1]))
        chunks.append(tensor.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    sidecar = {
        "input_dim": params.input_dim,
        "hidden_dim": params.hidden_dim,
        "n_topics": params.n_topics,
        "final_loss": final_loss,
        "train_config": asdict(train_config) if train_config else None,
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(path: str | Path) -> PredictorParams:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != PARAMS_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {PARAMS_MAGIC!r}")
        fh.read(12)  # shape summary, re-derived from tensors below
        tensors = {}
        for key in _TENSOR_ORDER:
            rows, cols = struct.unpack("<II", fh.read(8))
            data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8").reshape(rows, cols)
            tensors[key] = np.ascontiguousarray(data)
    for key in ("b1", "b2", "b3"):
        tensors[key] = tensors[key][0]
    return PredictorParams(**tensors)
