"""Pipeline command-line interface.

Six subcommands, one per stage, in dependency order::

    mine       demos + embeddings          -> topics.jsonl
    label      + topics + topic embeddings -> labels.jsonl, labeled topic set
    train      + labels                    -> predictor params (+ sidecar)
    knowledge  + zero-shot outcomes        -> knowledge vector (+ sidecar)
    retrieve   + test inputs               -> selections.jsonl
    eval       ablation variant            -> coverage/redundancy CSV

Each stage validates its prerequisites (exit 2 names the missing file),
reads one JSON config (exit 3 on invalid config), writes artifacts
atomically, and drops a manifest with input/output hashes next to its
primary artifact. Exit 1 is any runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import corpus, knowledge, metrics, retrieval, services, topic_identification, topic_predictor

logger = logging.getLogger(__name__)

EXIT_RUNTIME = 1
EXIT_MISSING = 2
EXIT_CONFIG = 3


class ConfigError(ValueError):
    """The pipeline config is missing, malformed, or out of range."""


class MissingArtifactError(FileNotFoundError):
    """A prerequisite stage artifact does not exist."""


@dataclasses.dataclass
class PipelineConfig:
    paths: dict[str, Path]
    bm25: topic_identification.Bm25Params
    miner: topic_identification.MinerConfig
    train: topic_predictor.TrainConfig
    retrieval: retrieval.RetrievalConfig
    matcher_mode: str
    matcher: services.MatcherEndpointConfig
    top_r: int
    top_c: int
    raw: dict

    def path(self, key: str) -> Path:
        try:
            return self.paths[key]
        except KeyError:
            raise ConfigError(f"config paths.{key} is required for this stage") from None


_SECTION_FIELD_ALIASES = {"lambda": "lam", "model": "model_name"}


def _build_section(cls, data: dict, section: str):
    kwargs = {}
    valid = {f.name for f in dataclasses.fields(cls)}
    for key, value in (data or {}).items():
        field_name = _SECTION_FIELD_ALIASES.get(key, key)
        if field_name not in valid:
            raise ConfigError(f"unknown key {key!r} in config section {section!r}")
        kwargs[field_name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section {section!r}: {exc}") from exc


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known_sections = {"paths", "bm25", "miner", "train", "retrieval", "matcher", "metrics"}
    unknown = sorted(set(raw) - known_sections)
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")

    base = path.parent
    paths = {}
    for key, value in (raw.get("paths") or {}).items():
        if not isinstance(value, str):
            raise ConfigError(f"paths.{key} must be a string")
        p = Path(value)
        paths[key] = p if p.is_absolute() else base / p

    matcher_section = dict(raw.get("matcher") or {})
    matcher_mode = matcher_section.pop("mode", "stub")
    if matcher_mode not in ("stub", "http"):
        raise ConfigError(f"matcher.mode must be 'stub' or 'http', got {matcher_mode!r}")
    if "cache_path" in matcher_section and matcher_section["cache_path"]:
        cache = Path(matcher_section["cache_path"])
        matcher_section["cache_path"] = str(cache if cache.is_absolute() else base / cache)

    metrics_section = dict(raw.get("metrics") or {})
    top_r = int(metrics_section.pop("top_r", metrics.DEFAULT_TOP_R))
    top_c = int(metrics_section.pop("top_c", metrics.DEFAULT_TOP_C))
    if metrics_section:
        raise ConfigError(f"unknown keys in config section 'metrics': {sorted(metrics_section)}")

    return PipelineConfig(
        paths=paths,
        bm25=_build_section(topic_identification.Bm25Params, raw.get("bm25"), "bm25"),
        miner=_build_section(topic_identification.MinerConfig, raw.get("miner"), "miner"),
        train=_build_section(topic_predictor.TrainConfig, raw.get("train"), "train"),
        retrieval=_build_section(retrieval.RetrievalConfig, raw.get("retrieval"), "retrieval"),
        matcher_mode=matcher_mode,
        matcher=_build_section(services.MatcherEndpointConfig, matcher_section, "matcher"),
        top_r=top_r,
        top_c=top_c,
        raw=raw,
    )


def _require_files(**named_paths: Path) -> None:
    for name, p in named_paths.items():
        if not Path(p).exists():
            raise MissingArtifactError(f"missing {name} artifact: {p}")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.raw, sort_keys=True).encode("utf-8")).hexdigest()


def _atomic(path: Path, write_fn) -> list[Path]:
    """Run write_fn against a temp path, then rename outputs into place.

    write_fn may create sidecars named ``<tmp>.json``; they are moved to
    ``<path>.json``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    write_fn(tmp)
    produced = [path]
    os.replace(tmp, path)
    sidecar = Path(str(tmp) + ".json")
    if sidecar.exists():
        os.replace(sidecar, Path(str(path) + ".json"))
        produced.append(Path(str(path) + ".json"))
    return produced


def _write_manifest(stage: str, cfg: PipelineConfig, inputs: dict[str, Path], outputs: list[Path], started: float) -> None:
    manifest = {
        "stage": stage,
        "config_sha256": _config_hash(cfg),
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items()},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "duration_s": round(time.time() - started, 3),
    }
    primary = outputs[0]
    with open(str(primary) + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_pool(cfg: PipelineConfig, topics_key: str | None, with_topic_embeddings: bool) -> corpus.CandidatePool:
    demos = cfg.path("demos")
    embeddings = cfg.path("embeddings")
    _require_files(demos=demos, embeddings=embeddings)
    topics_path = None
    topic_embs_path = None
    if topics_key is not None:
        topics_path = cfg.path(topics_key)
        _require_files(**{topics_key: topics_path})
        if with_topic_embeddings:
            topic_embs_path = cfg.path("topic_embeddings")
            _require_files(topic_embeddings=topic_embs_path)
    return corpus.load_pool(demos, embeddings, topics_path, topic_embs_path)


def _make_matcher(cfg: PipelineConfig, pool: corpus.CandidatePool):
    if cfg.matcher_mode == "stub":
        return services.StubCoreTopicMatcher(pool, cfg.bm25)
    return services.HttpCoreTopicMatcher(cfg.matcher)


# ---------------------------------------------------------------------------
# Stage commands
# ---------------------------------------------------------------------------

def cmd_mine(cfg: PipelineConfig, args) -> int:
    started = time.time()
    pool = _load_pool(cfg, topics_key=None, with_topic_embeddings=False)
    topics = topic_identification.mine_topics(pool, cfg.miner)
    out = cfg.path("topics")

    def write(tmp: Path):
        corpus.save_topics(topics, tmp)

    outputs = _atomic(out, write)
    _write_manifest("mine", cfg, {"demos": cfg.path("demos"), "embeddings": cfg.path("embeddings")}, outputs, started)
    logger.info("mined %d topics -> %s", len(topics), out)
    return 0


def cmd_label(cfg: PipelineConfig, args) -> int:
    started = time.time()
    pool = _load_pool(cfg, topics_key="topics", with_topic_embeddings=True)
    matcher = _make_matcher(cfg, pool)
    threads = args.threads if cfg.matcher_mode == "http" else 1
    topic_identification.label_pool(pool, matcher, cfg.bm25, threads=threads)

    labels_out = cfg.path("labels")
    topics_out = cfg.path("labeled_topics")
    outputs = _atomic(labels_out, lambda tmp: corpus.save_labels(pool, tmp))
    outputs += _atomic(topics_out, lambda tmp: corpus.save_topics(pool.topics, tmp))
    inputs = {
        "demos": cfg.path("demos"),
        "embeddings": cfg.path("embeddings"),
        "topics": cfg.path("topics"),
        "topic_embeddings": cfg.path("topic_embeddings"),
    }
    _write_manifest("label", cfg, inputs, outputs, started)
    logger.info("labeled %d demonstrations -> %s", len(pool), labels_out)
    return 0


def cmd_train(cfg: PipelineConfig, args) -> int:
    started = time.time()
    labels = cfg.path("labels")
    _require_files(labels=labels)
    pool = _load_pool(cfg, topics_key="labeled_topics", with_topic_embeddings=True)
    corpus.load_labels(pool, labels)

    train_cfg = cfg.train
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    params = topic_predictor.train(pool, train_cfg)
    final_loss = topic_predictor.loss(
        params,
        topic_predictor._pool_batch(pool),
        negative_subsample=None,
    )

    out = cfg.path("params")
    outputs = _atomic(out, lambda tmp: topic_predictor.save_params(params, tmp, train_cfg, final_loss))
    inputs = {
        "demos": cfg.path("demos"),
        "embeddings": cfg.path("embeddings"),
        "labeled_topics": cfg.path("labeled_topics"),
        "topic_embeddings": cfg.path("topic_embeddings"),
        "labels": labels,
    }
    _write_manifest("train", cfg, inputs, outputs, started)
    logger.info("trained predictor (final loss %.4f) -> %s", final_loss, out)
    return 0


def cmd_knowledge(cfg: PipelineConfig, args) -> int:
    started = time.time()
    params_path = cfg.path("params")
    zeroshot = cfg.path("zeroshot")
    _require_files(params=params_path, zeroshot=zeroshot)
    pool = _load_pool(cfg, topics_key="labeled_topics", with_topic_embeddings=False)
    corpus.ingest_zero_shot(pool, zeroshot)
    params = topic_predictor.load_params(params_path)
    estimate = knowledge.estimate_knowledge(pool, params, cfg.retrieval.eps)

    out = cfg.path("knowledge")
    outputs = _atomic(out, lambda tmp: knowledge.save_knowledge(estimate, tmp, pool))
    inputs = {
        "demos": cfg.path("demos"),
        "embeddings": cfg.path("embeddings"),
        "labeled_topics": cfg.path("labeled_topics"),
        "zeroshot": zeroshot,
        "params": params_path,
    }
    _write_manifest("knowledge", cfg, inputs, outputs, started)
    logger.info("estimated knowledge over %d topics -> %s", len(estimate), out)
    return 0


def _load_tests(cfg: PipelineConfig) -> tuple[list[str], np.ndarray]:
    tests_path = cfg.path("tests")
    test_embs_path = cfg.path("test_embeddings")
    _require_files(tests=tests_path, test_embeddings=test_embs_path)
    ids: list[str] = []
    with open(tests_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "id" not in record:
                raise corpus.FormatError(f"{tests_path}:{lineno}: missing field 'id'")
            ids.append(str(record["id"]))
    embs = corpus.load_embeddings(test_embs_path)
    if len(embs) != len(ids):
        raise corpus.FormatError(
            f"{test_embs_path}: {len(embs)} embedding rows for {len(ids)} test inputs"
        )
    return ids, embs


def cmd_retrieve(cfg: PipelineConfig, args) -> int:
    started = time.time()
    params_path = cfg.path("params")
    knowledge_path = cfg.path("knowledge")
    _require_files(params=params_path, knowledge=knowledge_path)
    pool = _load_pool(cfg, topics_key="labeled_topics", with_topic_embeddings=False)
    params = topic_predictor.load_params(params_path)
    t_lm = knowledge.load_knowledge(knowledge_path, pool)
    test_ids, test_embs = _load_tests(cfg)

    explain_top = 10 if args.explain else 0
    results = retrieval.retrieve_batch(
        test_ids, test_embs, pool, params, t_lm, cfg.retrieval, explain_top, threads=args.threads
    )

    def write(tmp: Path):
        with open(tmp, "w", encoding="utf-8") as fh:
            for result in results:
                record = {
                    "id": result.test_id,
                    "selected": result.selected,
                    "scores": result.scores,
                }
                if args.explain:
                    record["steps"] = [
                        {
                            "id": step.demo_id,
                            "relevance": step.relevance,
                            "score": step.score,
                            "top_topics": [
                                {"topic": pool.topics.names[t], "summand": value}
                                for t, value in step.top_topics
                            ],
                        }
                        for step in result.per_step
                    ]
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    out = cfg.path("selections")
    outputs = _atomic(out, write)
    inputs = {
        "demos": cfg.path("demos"),
        "embeddings": cfg.path("embeddings"),
        "labeled_topics": cfg.path("labeled_topics"),
        "params": params_path,
        "knowledge": knowledge_path,
        "tests": cfg.path("tests"),
        "test_embeddings": cfg.path("test_embeddings"),
    }
    _write_manifest("retrieve", cfg, inputs, outputs, started)
    logger.info("retrieved %d-shot selections for %d test inputs -> %s", cfg.retrieval.k, len(results), out)
    return 0


def cmd_eval(cfg: PipelineConfig, args) -> int:
    started = time.time()
    zeroshot = cfg.path("zeroshot")
    _require_files(zeroshot=zeroshot)
    pool = _load_pool(cfg, topics_key="labeled_topics", with_topic_embeddings=True)
    corpus.ingest_zero_shot(pool, zeroshot)
    test_ids, test_embs = _load_tests(cfg)

    train_cfg = cfg.train
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    matcher = services.HttpCoreTopicMatcher(cfg.matcher) if cfg.matcher_mode == "http" else None
    result = metrics.run_ablation(
        pool,
        test_ids,
        test_embs,
        args.variant,
        train_cfg=train_cfg,
        retrieval_cfg=cfg.retrieval,
        bm25_params=cfg.bm25,
        top_r=cfg.top_r,
        top_c=cfg.top_c,
        matcher=matcher,
    )

    out = cfg.path("report")
    outputs = _atomic(out, lambda tmp: metrics.write_coverage_csv(result.reports, tmp))

    selections_out = cfg.paths.get("eval_selections")
    if selections_out is not None:
        def write_selections(tmp: Path):
            with open(tmp, "w", encoding="utf-8") as fh:
                for sel in result.selections:
                    fh.write(
                        json.dumps(
                            {"id": sel.test_id, "selected": sel.selected, "scores": sel.scores, "variant": result.variant},
                            ensure_ascii=False,
                        )
                        + "\n"
                    )

        outputs += _atomic(selections_out, write_selections)

    inputs = {
        "demos": cfg.path("demos"),
        "embeddings": cfg.path("embeddings"),
        "labeled_topics": cfg.path("labeled_topics"),
        "topic_embeddings": cfg.path("topic_embeddings"),
        "zeroshot": zeroshot,
        "tests": cfg.path("tests"),
        "test_embeddings": cfg.path("test_embeddings"),
    }
    _write_manifest("eval", cfg, inputs, outputs, started)
    logger.info("wrote %s ablation report -> %s", result.variant, out)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "mine": cmd_mine,
    "label": cmd_label,
    "train": cmd_train,
    "knowledge": cmd_knowledge,
    "retrieve": cmd_retrieve,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline config JSON")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="intra-stage worker threads")
    common.add_argument("--seed", type=int, default=None, help="override the training seed")

    parser = argparse.ArgumentParser(prog="topicover", description="Topic-coverage demonstration retrieval pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("mine", "label", "train", "knowledge"):
        sub.add_parser(name, parents=[common])
    retrieve_parser = sub.add_parser("retrieve", parents=[common])
    retrieve_parser.add_argument("--explain", action="store_true", help="include per-step top topics")
    eval_parser = sub.add_parser("eval", parents=[common])
    eval_parser.add_argument(
        "--variant",
        choices=metrics.ABLATION_VARIANTS,
        default="full",
        help="ablation variant to evaluate",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if not hasattr(args, "explain"):
        args.explain = False
    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"{exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
