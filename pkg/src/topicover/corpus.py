"""Candidate pool: domain types, corpus statistics, and file I/O.

Every pipeline stage exchanges data through the formats defined here:

* demonstrations, topics, labels, zero-shot outcomes: JSON Lines (UTF-8,
  one record per line)
* embedding matrices: ``TPKEMB01`` binary (8-byte magic, u32-LE rows,
  u32-LE dim, rows*dim little-endian float32)

A loaded pool is immutable for the retrieval stages; label loading and
zero-shot ingestion are single-writer, pre-pipeline mutations.
"""

from __future__ import annotations

import hashlib
import json
import struct
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EMBEDDING_MAGIC = b"TPKEMB01"


class FormatError(ValueError):
    """An input file is malformed or inconsistent with the pool."""


def tokenize(text: str) -> list[str]:
    """Canonical tokenization shared by every lexical component.

    NFC-normalize, lowercase, split on any non-alphanumeric codepoint,
    drop empty tokens. Deterministic across runs and platforms.
    """
    text = unicodedata.normalize("NFC", text).lower()
    tokens: list[str] = []
    current: list[str] = []
    for ch in text:
        if ch.isalnum():
            current.append(ch)
        elif current:
            tokens.append("".join(current))
            current = []
    if current:
        tokens.append("".join(current))
    return tokens


def normalize_topic_name(name: str) -> str:
    """Canonical form of a topic name: tokenized and space-joined."""
    return " ".join(tokenize(name))


@dataclass
class Demonstration:
    """One candidate-pool entry: an input/output pair plus its labels."""

    id: str
    input_text: str
    output_text: str
    embedding_index: int
    core_topics: set[int] = field(default_factory=set)
    soft_label: dict[int, float] = field(default_factory=dict)
    zero_shot_correct: bool | None = None

    @property
    def text(self) -> str:
        """Full demonstration text, the document lexical scoring sees."""
        return f"{self.input_text}\n{self.output_text}"


class TopicSet:
    """Ordered topic vocabulary with optional name embeddings.

    Names are unique, non-empty, and lowercase-normalized. Name embeddings
    are one row per topic; topics admitted after the embedding file was
    produced carry NaN rows until an embedding is supplied (the predictor
    refuses to initialize from those).
    """

    def __init__(self, names: list[str], name_embeddings: np.ndarray | None = None):
        self.names: list[str] = []
        self._index: dict[str, int] = {}
        for name in names:
            norm = normalize_topic_name(name)
            if not norm:
                raise FormatError(f"empty topic name after normalization: {name!r}")
            if norm in self._index:
                raise FormatError(f"duplicate topic name: {norm!r}")
            self._index[norm] = len(self.names)
            self.names.append(norm)
        if name_embeddings is not None:
            name_embeddings = np.asarray(name_embeddings, dtype=np.float32)
            if name_embeddings.ndim != 2 or name_embeddings.shape[0] != len(self.names):
                raise FormatError(
                    f"topic embeddings have {name_embeddings.shape[0] if name_embeddings.ndim == 2 else '?'} "
                    f"rows for {len(self.names)} topics"
                )
        self.name_embeddings = name_embeddings

    def __len__(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int | None:
        return self._index.get(normalize_topic_name(name))

    def add(self, name: str) -> int:
        """Add a topic (embedding pending), or return its existing index."""
        norm = normalize_topic_name(name)
        if not norm:
            raise ValueError(f"cannot add empty topic name: {name!r}")
        existing = self._index.get(norm)
        if existing is not None:
            return existing
        idx = len(self.names)
        self._index[norm] = idx
        self.names.append(norm)
        if self.name_embeddings is not None:
            nan_row = np.full((1, self.name_embeddings.shape[1]), np.nan, dtype=np.float32)
            self.name_embeddings = np.vstack([self.name_embeddings, nan_row])
        return idx

    def set_name_embedding(self, index: int, vector: np.ndarray) -> None:
        if self.name_embeddings is None:
            raise ValueError("topic set has no embedding matrix to update")
        self.name_embeddings[index] = np.asarray(vector, dtype=np.float32)

    def missing_embeddings(self) -> list[str]:
        """Names of topics whose embedding row is absent or non-finite."""
        if self.name_embeddings is None:
            return list(self.names)
        bad = ~np.isfinite(self.name_embeddings).all(axis=1)
        return [self.names[i] for i in np.nonzero(bad)[0]]


@dataclass
class CorpusStats:
    """BM25 statistics, recomputable bit-identically from the raw texts."""

    term_freqs: list[Counter]
    doc_lengths: np.ndarray
    doc_freqs: Counter
    n_docs: int
    avg_doc_length: float


def compute_corpus_stats(texts: list[str]) -> CorpusStats:
    term_freqs = [Counter(tokenize(t)) for t in texts]
    doc_lengths = np.array([sum(tf.values()) for tf in term_freqs], dtype=np.int64)
    doc_freqs: Counter = Counter()
    for tf in term_freqs:
        doc_freqs.update(tf.keys())
    n = len(texts)
    avg = float(doc_lengths.mean()) if n else 0.0
    return CorpusStats(term_freqs, doc_lengths, doc_freqs, n, avg)


@dataclass
class CandidatePool:
    """Demonstrations + embeddings + topic vocabulary + corpus statistics."""

    demonstrations: list[Demonstration]
    embeddings: np.ndarray
    topics: TopicSet
    stats: CorpusStats

    def __post_init__(self):
        self._by_id = {d.id: i for i, d in enumerate(self.demonstrations)}
        if len(self._by_id) != len(self.demonstrations):
            seen: set[str] = set()
            for d in self.demonstrations:
                if d.id in seen:
                    raise FormatError(f"duplicate demonstration id: {d.id!r}")
                seen.add(d.id)
        for d in self.demonstrations:
            if not 0 <= d.embedding_index < len(self.embeddings):
                raise FormatError(
                    f"demonstration {d.id!r}: embedding index {d.embedding_index} out of "
                    f"range for {len(self.embeddings)} rows"
                )

    def __len__(self) -> int:
        return len(self.demonstrations)

    def index_of_id(self, demo_id: str) -> int:
        try:
            return self._by_id[demo_id]
        except KeyError:
            raise KeyError(f"unknown demonstration id: {demo_id!r}") from None

    def demo_embedding(self, demo: Demonstration) -> np.ndarray:
        return self.embeddings[demo.embedding_index]


# ---------------------------------------------------------------------------
# Binary embedding files
# ---------------------------------------------------------------------------

def save_embeddings(path: str | Path, matrix: np.ndarray) -> None:
    """Write a TPKEMB01 file. Values must be finite."""
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2:
        raise ValueError(f"embedding matrix must be 2-D, got shape {matrix.shape}")
    if matrix.size and not np.isfinite(matrix).all():
        raise ValueError("embedding matrix contains non-finite values")
    rows, dim = matrix.shape
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", rows, dim))
        fh.write(matrix.astype("<f4").tobytes(order="C"))


def load_embeddings(path: str | Path) -> np.ndarray:
    """Read a TPKEMB01 file into a (rows, dim) float32 array."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != EMBEDDING_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise FormatError(f"{path}: truncated header")
        rows, dim = struct.unpack("<II", header)
        payload = fh.read()
    expected = rows * dim * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, dim)
    return np.ascontiguousarray(data, dtype=np.float32)


# ---------------------------------------------------------------------------
# JSONL record files
# ---------------------------------------------------------------------------

def _iter_jsonl(path: str | Path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise FormatError(f"{path}:{lineno}: record is not an object")
            yield lineno, record


def _require(record: dict, key: str, path, lineno: int):
    if key not in record:
        raise FormatError(f"{path}:{lineno}: missing field {key!r}")
    return record[key]


def load_topics(names_path: str | Path, embeddings_path: str | Path | None = None) -> TopicSet:
    """Load topics.jsonl plus an optional TPKEMB01 name-embedding file.

    An embedding file with fewer rows than topics leaves the tail topics
    pending (NaN rows); training fails fast on those until embeddings are
    supplied.
    """
    names: list[str] = []
    for lineno, record in _iter_jsonl(names_path):
        name = _require(record, "name", names_path, lineno)
        if not isinstance(name, str) or not name.strip():
            raise FormatError(f"{names_path}:{lineno}: topic name must be a non-empty string")
        names.append(name)
    embeddings = None
    if embeddings_path is not None:
        embeddings = load_embeddings(embeddings_path)
        if embeddings.shape[0] > len(names):
            raise FormatError(
                f"{embeddings_path}: {embeddings.shape[0]} embedding rows for {len(names)} topics"
            )
        if embeddings.shape[0] < len(names):
            pad = np.full((len(names) - embeddings.shape[0], embeddings.shape[1]), np.nan, dtype=np.float32)
            embeddings = np.vstack([embeddings, pad])
    return TopicSet(names, embeddings)


def save_topics(topics: TopicSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in topics.names:
            fh.write(json.dumps({"name": name}, ensure_ascii=False) + "\n")


def load_pool(
    demos_path: str | Path,
    embeddings_path: str | Path,
    topics_path: str | Path | None = None,
    topic_embeddings_path: str | Path | None = None,
) -> CandidatePool:
    """Load and validate a candidate pool.

    Demonstration order in demos.jsonl defines the embedding row order.
    ``topics_path=None`` yields an empty vocabulary (the state before the
    mining stage has run).
    """
    demos: list[Demonstration] = []
    seen_ids: set[str] = set()
    for lineno, record in _iter_jsonl(demos_path):
        demo_id = _require(record, "id", demos_path, lineno)
        if not isinstance(demo_id, str) or not demo_id:
            raise FormatError(f"{demos_path}:{lineno}: id must be a non-empty string")
        if demo_id in seen_ids:
            raise FormatError(f"{demos_path}:{lineno}: duplicate demonstration id {demo_id!r}")
        seen_ids.add(demo_id)
        input_text = _require(record, "input", demos_path, lineno)
        output_text = _require(record, "output", demos_path, lineno)
        if not isinstance(input_text, str) or not isinstance(output_text, str):
            raise FormatError(f"{demos_path}:{lineno}: input/output must be strings")
        demos.append(Demonstration(demo_id, input_text, output_text, embedding_index=len(demos)))

    embeddings = load_embeddings(embeddings_path)
    if embeddings.shape[0] != len(demos):
        raise FormatError(
            f"{embeddings_path}: {embeddings.shape[0]} embedding rows for {len(demos)} demonstrations"
        )
    if embeddings.size and not np.isfinite(embeddings).all():
        raise FormatError(f"{embeddings_path}: embeddings contain non-finite values")

    if topics_path is not None:
        topics = load_topics(topics_path, topic_embeddings_path)
    else:
        topics = TopicSet([])

    if topics.name_embeddings is not None and embeddings.size and topics.name_embeddings.size:
        if topics.name_embeddings.shape[1] != embeddings.shape[1]:
            raise FormatError(
                f"topic embedding dim {topics.name_embeddings.shape[1]} != "
                f"demonstration embedding dim {embeddings.shape[1]}"
            )

    stats = compute_corpus_stats([d.text for d in demos])
    return CandidatePool(demos, embeddings, topics, stats)


def save_labels(pool: CandidatePool, path: str | Path) -> None:
    """Persist core topics and soft labels, one record per demonstration.

    Serialization is canonical (topic indices ascending, repr-exact floats)
    so save/load round-trips byte-identically.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for demo in pool.demonstrations:
            record = {
                "id": demo.id,
                "core_topics": sorted(demo.core_topics),
                "soft_label": {str(t): demo.soft_label[t] for t in sorted(demo.soft_label)},
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_labels(pool: CandidatePool, path: str | Path) -> None:
    """Attach persisted labels to pool demonstrations in place."""
    n_topics = len(pool.topics)
    for lineno, record in _iter_jsonl(path):
        demo_id = _require(record, "id", path, lineno)
        try:
            demo = pool.demonstrations[pool.index_of_id(demo_id)]
        except KeyError:
            raise FormatError(f"{path}:{lineno}: unknown demonstration id {demo_id!r}") from None
        core = _require(record, "core_topics", path, lineno)
        soft = _require(record, "soft_label", path, lineno)
        core_set: set[int] = set()
        for t in core:
            if not isinstance(t, int) or t < 0 or t >= n_topics:
                raise FormatError(
                    f"{path}:{lineno}: topic index {t!r} out of range for |T|={n_topics}"
                )
            core_set.add(t)
        label: dict[int, float] = {}
        for key, weight in soft.items():
            t = int(key)
            if t < 0 or t >= n_topics:
                raise FormatError(
                    f"{path}:{lineno}: topic index {t} out of range for |T|={n_topics}"
                )
            if t not in core_set:
                raise FormatError(f"{path}:{lineno}: soft label key {t} not in core_topics")
            w = float(weight)
            if not (0.0 < w <= 1.0):
                raise FormatError(f"{path}:{lineno}: soft label weight {w} outside (0, 1]")
            label[t] = w
        if core_set and (not label or max(label.values()) != 1.0):
            raise FormatError(f"{path}:{lineno}: max soft label weight must be exactly 1")
        demo.core_topics = core_set
        demo.soft_label = label


def ingest_zero_shot(pool: CandidatePool, path: str | Path) -> None:
    """Attach zero-shot correctness outcomes; unlisted demonstrations stay unset."""
    for lineno, record in _iter_jsonl(path):
        demo_id = _require(record, "id", path, lineno)
        try:
            demo = pool.demonstrations[pool.index_of_id(demo_id)]
        except KeyError:
            raise FormatError(f"{path}:{lineno}: unknown demonstration id {demo_id!r}") from None
        correct = _require(record, "correct", path, lineno)
        if correct not in (0, 1) or isinstance(correct, bool):
            raise FormatError(f"{path}:{lineno}: 'correct' must be 0 or 1, got {correct!r}")
        demo.zero_shot_correct = bool(correct)


def pool_fingerprint(pool: CandidatePool) -> str:
    """Structural hash (ids, embeddings, topics) for staleness detection.

    Deliberately excludes labels and zero-shot outcomes so stages that
    never ingest those can still verify an artifact matches their pool;
    see outcomes_fingerprint for the outcome-sensitive part.
    """
    h = hashlib.sha256()
    for demo in pool.demonstrations:
        h.update(demo.id.encode("utf-8"))
        h.update(b"\x00")
    h.update(np.ascontiguousarray(pool.embeddings).tobytes())
    for name in pool.topics.names:
        h.update(name.encode("utf-8"))
        h.update(b"\x02")
    return h.hexdigest()


def outcomes_fingerprint(pool: CandidatePool) -> str:
    """Hash of the ingested zero-shot outcomes."""
    h = hashlib.sha256()
    for demo in pool.demonstrations:
        outcome = "-" if demo.zero_shot_correct is None else str(int(demo.zero_shot_correct))
        h.update(outcome.encode("ascii"))
        h.update(b"\x01")
    return h.hexdigest()


