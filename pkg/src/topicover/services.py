"""External-service clients: core-topic matcher and embedding fetcher.

Two matcher implementations share one interface (``match(demo_text,
candidate_names) -> list[str]``):

* ``HttpCoreTopicMatcher`` talks to any chat-completions-compatible
  endpoint, with bounded retries, bounded in-flight requests, and a
  crash-safe on-disk response cache so long labeling runs can resume.
* ``StubCoreTopicMatcher`` is a deterministic offline heuristic: keep
  candidates with lexical overlap or above-median cosine similarity,
  padding to at least five topics by cosine rank.

Secrets come from the environment (TOPICK_API_KEY); the endpoint URL may
come from config or TOPICK_BASE_URL.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import CandidatePool, normalize_topic_name

logger = logging.getLogger(__name__)

API_KEY_ENV = "TOPICK_API_KEY"
BASE_URL_ENV = "TOPICK_BASE_URL"

PROMPT_TEMPLATE = (
    "You will receive a question-answer demonstration along with a candidate topic set. "
    "Your task is to output relevant topics of the demonstration. You may choose topics "
    "from the candidate topic set, or you can create new relevant topics. You must "
    "provide at least five topics. Do not include any explanation or numbers. Please "
    "just output the list of relevant topics, separated by commas. "
    "Demonstration: {demo}, Candidate topic set: {candidates}"
)

MIN_TOPICS = 5


class MatcherError(RuntimeError):
    """The endpoint could not produce a usable response after retries."""


@dataclass
class MatcherEndpointConfig:
    base_url: str | None = None
    model_name: str = "gpt-4o"
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4
    backoff_seconds: float = 1.0
    cache_path: str | None = None

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError(f"timeout must be positive, got {self.timeout}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.max_in_flight < 1:
            raise ValueError(f"max_in_flight must be >= 1, got {self.max_in_flight}")

    def resolved_base_url(self) -> str:
        url = self.base_url or os.environ.get(BASE_URL_ENV)
        if not url:
            raise MatcherError(f"no endpoint configured: set base_url or {BASE_URL_ENV}")
        return url.rstrip("/")


def parse_topic_list(text: str) -> list[str]:
    """Comma-split, trim, normalize, and de-duplicate preserving order."""
    names = []
    seen = set()
    for part in text.split(","):
        norm = normalize_topic_name(part)
        if norm and norm not in seen:
            seen.add(norm)
            names.append(norm)
    return names


class ResponseCache:
    """Append-only JSONL cache, compacted (last entry wins) on load."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._entries: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            with open(self.path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        record = json.loads(line)
                    except json.JSONDecodeError:
                        logger.warning("skipping corrupt cache line in %s", self.path)
                        continue
                    self._entries[record["key"]] = record

    def get(self, key: str) -> dict | None:
        return self._entries.get(key)

    def put(self, key: str, value: dict) -> None:
        record = {"key": key, **value}
        with self._lock:
            self._entries[key] = record
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, ensure_ascii=False) + "\n")
                    fh.flush()


def _hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _requests_post(url: str, payload: dict, headers: dict, timeout: float) -> dict:
    import requests

    response = requests.post(url, json=payload, headers=headers, timeout=timeout)
    response.raise_for_status()
    return response.json()


class HttpCoreTopicMatcher:
    """Chat-completions client for core-topic matching.

    A custom ``transport(url, payload, headers, timeout) -> dict`` can be
    injected for testing; the default uses ``requests``.
    """

    def __init__(self, cfg: MatcherEndpointConfig, transport=None, cache: ResponseCache | None = None):
        self.cfg = cfg
        self.transport = transport or _requests_post
        self.cache = cache if cache is not None else ResponseCache(cfg.cache_path)
        self._in_flight = threading.Semaphore(cfg.max_in_flight)

    def _cache_key(self, demo_text: str, candidate_names: list[str]) -> str:
        return _hash(
            _hash(demo_text) + _hash("\x00".join(candidate_names)) + self.cfg.model_name
        )

    def _request(self, prompt: str) -> dict:
        url = self.cfg.resolved_base_url() + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
        }
        last_error: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            try:
                with self._in_flight:
                    return self.transport(url, payload, headers, self.cfg.timeout)
            except Exception as exc:
                last_error = exc
                if attempt < self.cfg.max_retries:
                    delay = self.cfg.backoff_seconds * (2.0**attempt)
                    logger.warning("matcher request failed (%s); retrying in %.1fs", exc, delay)
                    time.sleep(delay)
        raise MatcherError(
            f"matcher request failed after {self.cfg.max_retries + 1} attempts: {last_error}"
        ) from last_error

    def match(self, demo_text: str, candidate_names: list[str]) -> list[str]:
        if not candidate_names:
            raise ValueError("candidate_names must be non-empty")
        key = self._cache_key(demo_text, candidate_names)
        cached = self.cache.get(key)
        if cached is not None:
            return list(cached["names"])

        prompt = PROMPT_TEMPLATE.format(demo=demo_text, candidates=", ".join(candidate_names))
        response = self._request(prompt)
        try:
            content = response["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MatcherError(f"malformed endpoint response: {response!r}") from exc
        names = parse_topic_list(content)
        self.cache.put(
            key,
            {
                "names": names,
                "model": self.cfg.model_name,
                "response_model": response.get("model"),
                "raw": content,
            },
        )
        return names


class StubCoreTopicMatcher:
    """Deterministic offline approximation of the LLM matcher.

    Keeps candidates with BM25 > 0 or cosine similarity at or above the
    candidate median, padded to at least five topics by cosine rank.
    Resolves demonstrations by exact text; unknown texts keep every
    candidate.
    """

    def __init__(self, pool: CandidatePool, bm25_params=None):
        from .topic_identification import Bm25Params

        self.pool = pool
        self.bm25_params = bm25_params or Bm25Params()
        self._by_text: dict[str, int] = {}
        for i, demo in enumerate(pool.demonstrations):
            self._by_text.setdefault(demo.text, i)

    def match(self, demo_text: str, candidate_names: list[str]) -> list[str]:
        from .topic_identification import bm25

        if not candidate_names:
            raise ValueError("candidate_names must be non-empty")
        demo_idx = self._by_text.get(demo_text)
        if demo_idx is None:
            return list(candidate_names)
        demo = self.pool.demonstrations[demo_idx]

        indices = []
        for name in candidate_names:
            idx = self.pool.topics.index_of(name)
            if idx is None:
                return list(candidate_names)
            indices.append(idx)

        lexical = np.array([bm25(demo, t, self.pool, self.bm25_params) for t in indices])
        cosines = np.zeros(len(indices))
        topic_embs = self.pool.topics.name_embeddings
        if topic_embs is not None and len(topic_embs):
            e_d = self.pool.demo_embedding(demo).astype(np.float64)
            e_norm = np.linalg.norm(e_d)
            if e_norm > 0:
                rows = topic_embs[indices].astype(np.float64)
                row_norms = np.linalg.norm(rows, axis=1)
                with np.errstate(invalid="ignore", divide="ignore"):
                    cosines = rows @ e_d / (np.where(row_norms > 0, row_norms, 1.0) * e_norm)
                cosines = np.nan_to_num(cosines, nan=-1.0)

        median = float(np.median(cosines))
        keep = [i for i in range(len(indices)) if lexical[i] > 0.0 or cosines[i] >= median]
        want = min(MIN_TOPICS, len(indices))
        if len(keep) < want:
            by_cosine = sorted(range(len(indices)), key=lambda i: (-cosines[i], indices[i]))
            for i in by_cosine:
                if i not in keep:
                    keep.append(i)
                if len(keep) >= want:
                    break
            keep.sort()
        return [candidate_names[i] for i in keep]


def fetch_embeddings(
    texts: list[str],
    cfg: MatcherEndpointConfig,
    transport=None,
    cache: ResponseCache | None = None,
) -> np.ndarray:
    """Fetch embeddings for texts, order-preserving, disk-cached per text."""
    if not texts:
        return np.zeros((0, 0), dtype=np.float32)
    transport = transport or _requests_post
    cache = cache if cache is not None else ResponseCache(cfg.cache_path)

    vectors: list[np.ndarray | None] = [None] * len(texts)
    missing: dict[str, list[int]] = {}
    for i, text in enumerate(texts):
        key = _hash("emb\x00" + cfg.model_name + "\x00" + text)
        cached = cache.get(key)
        if cached is not None:
            vectors[i] = np.asarray(cached["embedding"], dtype=np.float32)
        else:
            missing.setdefault(text, []).append(i)

    if missing:
        url = cfg.resolved_base_url() + "/embeddings"
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        unique_texts = list(missing.keys())
        payload = {"model": cfg.model_name, "input": unique_texts}
        response = transport(url, payload, headers, cfg.timeout)
        data = sorted(response["data"], key=lambda item: item["index"])
        if len(data) != len(unique_texts):
            raise MatcherError(f"expected {len(unique_texts)} embeddings, got {len(data)}")
        for text, item in zip(unique_texts, data):
            vector = np.asarray(item["embedding"], dtype=np.float32)
            key = _hash("emb\x00" + cfg.model_name + "\x00" + text)
            cache.put(key, {"embedding": [float(v) for v in vector], "model": cfg.model_name})
            for i in missing[text]:
                vectors[i] = vector

    dims = {len(v) for v in vectors if v is not None}
    if len(dims) != 1:
        raise MatcherError(f"inconsistent embedding dimensions: {sorted(dims)}")
    return np.stack([v for v in vectors])  # type: ignore[arg-type]
