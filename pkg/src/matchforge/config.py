"""Configuration resolution: flags override file values override defaults.

The config file is JSON; its path comes from --config or MATCHFORGE_CONFIG.
Live LLM credentials come from MATCHFORGE_LLM_URL / MATCHFORGE_LLM_KEY.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .embedding_index import Embedder, HashEmbedder, RemoteEmbedder, VectorIndex
from .llm_gateway import (
    Backend,
    Cassette,
    LiveBackend,
    LlmParams,
    RecordingBackend,
    ReplayBackend,
)
from .match_pipeline import MatchPipeline, PipelineConfig
from .schema_model import MappingSet, Schema, load_ground_truth, load_schema

ENV_CONFIG = "MATCHFORGE_CONFIG"
ENV_LLM_URL = "MATCHFORGE_LLM_URL"
ENV_LLM_KEY = "MATCHFORGE_LLM_KEY"

CONFIG_KEYS = (
    "k_semantic",
    "k_reason",
    "refine_limit",
    "tau",
    "parallelism",
    "ablation",
    "mcq_via_llm",
    "backend",
    "cassette",
    "record",
    "demo_dir",
    "embedder",
    "embedder_url",
    "dim",
    "seed",
    "model_tag",
    "temperature",
    "max_tokens",
    "gold",
    "index",
)


class ConfigError(ValueError):
    """Bad or inconsistent configuration."""


def load_config_file(path: str | Path | None) -> dict:
    if path is None:
        path = os.environ.get(ENV_CONFIG)
    if not path:
        return {}
    raw = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    unknown = set(data) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return data


def resolve(flag_values: dict, file_values: dict) -> dict:
    """Merge with precedence: explicit flag > config file > defaults."""
    merged = dict(file_values)
    for key, value in flag_values.items():
        if value is not None:
            merged[key] = value
    return merged


def build_embedder(settings: dict) -> Embedder:
    kind = settings.get("embedder", "hash")
    if kind == "hash":
        return HashEmbedder(
            dim=int(settings.get("dim", 64)), seed=int(settings.get("seed", 0))
        )
    if kind == "remote":
        url = settings.get("embedder_url")
        if not url:
            raise ConfigError("remote embedder requires embedder_url")
        return RemoteEmbedder(base_url=url)
    raise ConfigError(f"unknown embedder {kind!r}")


def build_backend(settings: dict) -> Backend:
    kind = settings.get("backend", "replay")
    if kind == "replay":
        cassette_path = settings.get("cassette")
        if not cassette_path:
            raise ConfigError("replay backend requires a cassette path")
        if not Path(cassette_path).exists():
            raise ConfigError(f"cassette {cassette_path!r} does not exist")
        return ReplayBackend(Cassette(cassette_path))
    if kind == "live":
        url = settings.get("llm_url") or os.environ.get(ENV_LLM_URL)
        if not url:
            raise ConfigError(f"live backend requires {ENV_LLM_URL}")
        key = settings.get("llm_key") or os.environ.get(ENV_LLM_KEY, "")
        backend: Backend = LiveBackend(base_url=url, api_key=key)
        record_path = settings.get("record")
        if record_path:
            backend = RecordingBackend(backend, Cassette(record_path))
        return backend
    raise ConfigError(f"unknown backend {kind!r}")


def build_params(settings: dict) -> LlmParams:
    defaults = LlmParams()
    return LlmParams(
        temperature=float(settings.get("temperature", defaults.temperature)),
        max_tokens=int(settings.get("max_tokens", defaults.max_tokens)),
        model_tag=str(settings.get("model_tag", defaults.model_tag)),
    )


def build_pipeline_config(settings: dict) -> PipelineConfig:
    return PipelineConfig(
        k_semantic=int(settings.get("k_semantic", 5)),
        k_reason=int(settings.get("k_reason", 5)),
        refine_limit=int(settings.get("refine_limit", 5)),
        tau=float(settings.get("tau", 0.0)),
        parallelism=int(settings.get("parallelism", 1)),
        ablation=settings.get("ablation", "full"),
        mcq_via_llm=bool(settings.get("mcq_via_llm", False)),
        params=build_params(settings),
    )


def build_index(target: Schema, embedder: Embedder, settings: dict) -> VectorIndex:
    index_path = settings.get("index")
    if index_path:
        index = VectorIndex.load(index_path)
        if index.schema_name != target.name:
            raise ConfigError(
                f"index was built for schema {index.schema_name!r}, not {target.name!r}"
            )
        return index
    return VectorIndex.build(target, embedder)


def build_pipeline_from_request(request: dict) -> tuple[MatchPipeline, MappingSet | None]:
    """Construct a runnable pipeline from a service run request."""
    settings = dict(request.get("config", {}))
    source = load_schema(request["source"])
    target = load_schema(request["target"])
    embedder = build_embedder(settings)
    backend = build_backend(settings)
    index = build_index(target, embedder, settings)
    demos = {}
    demo_dir = settings.get("demo_dir")
    if demo_dir:
        from .self_improve import load_demo_sets

        demos = {stage: ds.demos for stage, ds in load_demo_sets(demo_dir).items()}
    pipeline = MatchPipeline(
        source=source,
        target=target,
        index=index,
        backend=backend,
        embedder=embedder,
        config=build_pipeline_config(settings),
        demos=demos,
    )
    gold = None
    gold_path = settings.get("gold")
    if gold_path:
        gold = load_ground_truth(gold_path, source, target)
    return pipeline, gold
