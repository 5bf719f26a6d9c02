"""Engine configuration: JSON file, named profiles, environment variables, then command-line flags."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from .errors import UsageError
from .evaluation import DEFAULT_K_VALUES
from .retrieval import RetrievalConfig

ENV_EMBED_ENDPOINT = "DCTR_EMBED_ENDPOINT"
ENV_EMBED_TOKEN = "DCTR_EMBED_TOKEN"
ENV_LLM_ENDPOINT = "DCTR_LLM_ENDPOINT"
ENV_LLM_TOKEN = "DCTR_LLM_TOKEN"

PROFILES: dict[str, dict[str, Any]] = {
    # best grid setting at k=10 in the original experiments
    "paper-k10": {"vote_k": 2, "n_groups": 2, "k": 10},
}


@dataclass(frozen=True)
class EmbedderConfig:
    provider_name: str = "deterministic"
    endpoint: str | None = None
    dim: int = 64
    batch: int = 128
    normalizes: bool = False

    def __post_init__(self) -> None:
        if self.dim < 1 or self.batch < 1:
            raise UsageError("embedder dim and batch must be >= 1")
        if self.provider_name != "deterministic" and not self.endpoint:
            raise UsageError(f"provider {self.provider_name!r} needs an endpoint (config or ${ENV_EMBED_ENDPOINT})")


@dataclass(frozen=True)
class DecomposerConfig:
    model_id: str = "rule-fallback"
    endpoint: str | None = None
    cache_path: str | None = None
    fallback_only: bool = True
    max_concurrency: int = 4


@dataclass(frozen=True)
class EvalConfig:
    k_values: tuple[int, ...] = DEFAULT_K_VALUES
    runs: int = 3

    def __post_init__(self) -> None:
        ks = tuple(int(k) for k in self.k_values)
        if not ks or list(ks) != sorted(set(ks)) or ks[0] < 1:
            raise UsageError(f"k_values must be nonempty, strictly ascending and positive, got {list(ks)}")
        object.__setattr__(self, "k_values", ks)
        if self.runs < 1:
            raise UsageError("runs must be >= 1")


@dataclass(frozen=True)
class EngineConfig:
    corpus: str | None = None
    index_dir: str | None = None
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    decomposer: DecomposerConfig = field(default_factory=DecomposerConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: str | None = None
    seed: int = 0
    jobs: int = 1

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["eval"]["k_values"] = list(self.eval.k_values)
        return d


def _section(cls, doc: dict[str, Any], name: str):
    raw = doc.get(name) or {}
    if not isinstance(raw, dict):
        raise UsageError(f"config section {name!r} must be an object")
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UsageError(f"unknown keys in config section {name!r}: {', '.join(unknown)}")
    return raw


def config_from_dict(doc: dict[str, Any]) -> EngineConfig:
    top_known = set(EngineConfig.__dataclass_fields__)
    unknown = sorted(set(doc) - top_known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    ev = _section(EvalConfig, doc, "eval")
    if "k_values" in ev:
        ev = {**ev, "k_values": tuple(ev["k_values"])}
    try:
        return EngineConfig(
            corpus=doc.get("corpus"),
            index_dir=doc.get("index_dir"),
            embedder=EmbedderConfig(**_section(EmbedderConfig, doc, "embedder")),
            decomposer=DecomposerConfig(**_section(DecomposerConfig, doc, "decomposer")),
            retrieval=RetrievalConfig(**_section(RetrievalConfig, doc, "retrieval")),
            eval=EvalConfig(**ev),
            out=doc.get("out"),
            seed=int(doc.get("seed", 0)),
            jobs=int(doc.get("jobs", 1)),
        )
    except TypeError as exc:
        raise UsageError(f"bad config: {exc}") from None


def load_config(path: str | Path | None) -> EngineConfig:
    if path is None:
        return EngineConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return config_from_dict(doc)


def resolve_config(
    base: EngineConfig,
    profile: str | None = None,
    overrides: dict[str, Any] | None = None,
    env: dict[str, str] | None = None,
) -> EngineConfig:
    """Layer a profile, endpoint env vars and flag overrides (flags win) over ``base``.

    ``overrides`` uses flat keys: retrieval fields (``vote_k``, ``k``...),
    ``runs``, ``k_values``, ``dim``, ``provider``, ``corpus``, ``index_dir``,
    ``out``, ``seed``, ``jobs``. ``None`` values are ignored.
    """
    env = os.environ if env is None else env
    ov = {k: v for k, v in (overrides or {}).items() if v is not None}
    retrieval_fields = set(RetrievalConfig.__dataclass_fields__)

    r_updates: dict[str, Any] = {}
    if profile is not None:
        if profile not in PROFILES:
            raise UsageError(f"unknown profile {profile!r}; choose from {', '.join(sorted(PROFILES))}")
        r_updates.update(PROFILES[profile])
    r_updates.update({k: v for k, v in ov.items() if k in retrieval_fields})
    cfg = replace(base, retrieval=replace(base.retrieval, **r_updates)) if r_updates else base

    emb = cfg.embedder
    emb_updates: dict[str, Any] = {}
    if "provider" in ov:
        emb_updates["provider_name"] = ov["provider"]
    if "dim" in ov:
        emb_updates["dim"] = ov["dim"]
    if not emb.endpoint and env.get(ENV_EMBED_ENDPOINT):
        emb_updates["endpoint"] = env[ENV_EMBED_ENDPOINT]
    if emb_updates:
        cfg = replace(cfg, embedder=replace(emb, **emb_updates))

    dec = cfg.decomposer
    if not dec.endpoint and env.get(ENV_LLM_ENDPOINT):
        cfg = replace(cfg, decomposer=replace(dec, endpoint=env[ENV_LLM_ENDPOINT]))

    ev_updates = {}
    if "runs" in ov:
        ev_updates["runs"] = ov["runs"]
    if "k_values" in ov:
        ev_updates["k_values"] = tuple(ov["k_values"])
    if ev_updates:
        cfg = replace(cfg, eval=replace(cfg.eval, **ev_updates))

    top = {k: ov[k] for k in ("corpus", "index_dir", "out", "seed", "jobs") if k in ov}
    if top:
        cfg = replace(cfg, **top)
    if cfg.jobs < 1:
        raise UsageError("jobs must be >= 1")
    return cfg
