"""Text embedding providers, the batching/caching engine around them, and vector math.

Vectors are 1-D ``float64`` numpy arrays. Everything leaving :class:`Embedder`
is L2-normalised, so cosine similarity downstream is a plain dot product.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import threading
import time
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import ProviderContractError, TransientError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 128
NORM_TOL = 1e-6

_CAMEL_RE = re.compile(r"(?<=[a-z0-9])(?=[A-Z])|(?<=[A-Z])(?=[A-Z][a-z])")
_TOKEN_RE = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class EmbedderDescriptor:
    provider_name: str
    dim: int
    normalizes: bool

    def __post_init__(self) -> None:
        if self.dim <= 0:
            raise UsageError(f"embedding dim must be positive, got {self.dim}")


class EmbeddingProvider(Protocol):
    descriptor: EmbedderDescriptor

    def embed_batch(self, texts: list[str]) -> Sequence[Sequence[float]]: ...


def identifier_to_phrase(text: str) -> str:
    """``"customerOrder_ID"`` -> ``"customer order id"``."""
    spaced = _CAMEL_RE.sub(" ", text.replace("_", " ").replace("-", " "))
    return " ".join(spaced.lower().split())


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if not math.isfinite(norm) or norm == 0.0:
        raise ProviderContractError("cannot normalise a zero or non-finite vector")
    return vec / norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError(f"dimension mismatch: {a.shape} vs {b.shape}")
    denom = float(np.linalg.norm(a)) * float(np.linalg.norm(b))
    if denom == 0.0:
        raise UsageError("cosine similarity is undefined for a zero vector")
    return max(-1.0, min(1.0, float(np.dot(a, b)) / denom))


def _features(text: str, n: int = 3) -> list[str]:
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        stripped = text.strip().lower()
        return [stripped] if stripped else []
    feats: list[str] = []
    for tok in tokens:
        feats.append("w:" + tok)
        padded = f"#{tok}#"
        if len(padded) <= n:
            feats.append("g:" + padded)
        else:
            feats.extend("g:" + padded[i : i + n] for i in range(len(padded) - n + 1))
    return feats


def deterministic_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Signed feature hashing of word and character-trigram features.

    The hash is keyed blake2b, so the result depends only on ``(text, dim, seed)``
    and is identical across platforms and interpreter runs.
    """
    if dim < 8:
        raise UsageError(f"deterministic embedder needs dim >= 8, got {dim}")
    key = seed.to_bytes(8, "little", signed=True)
    vec = np.zeros(dim, dtype=np.float64)
    feats = _features(text) or ["<empty>"]
    for feat in feats:
        h = int.from_bytes(hashlib.blake2b(feat.encode("utf-8"), digest_size=8, key=key).digest(), "little")
        vec[h % dim] += -1.0 if (h >> 63) & 1 else 1.0
    if not vec.any():
        # every feature cancelled out; fall back to a single bucket so the vector is usable
        h = int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8, key=key).digest(), "little")
        vec[h % dim] = 1.0
    return vec / np.linalg.norm(vec)


class DeterministicEmbedder:
    """Offline provider for tests and the bundled synthetic benchmark."""

    def __init__(self, dim: int = 64, seed: int = 0) -> None:
        if dim < 8:
            raise UsageError(f"deterministic embedder needs dim >= 8, got {dim}")
        self.seed = seed
        self.descriptor = EmbedderDescriptor("deterministic", dim, normalizes=True)

    def embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        return [deterministic_embed(t, self.descriptor.dim, self.seed) for t in texts]


class HttpEmbedder:
    """Client for a remote service speaking ``{"texts": [...]} -> {"vectors": [[...]]}``."""

    def __init__(
        self,
        endpoint: str,
        dim: int,
        provider_name: str = "http",
        token: str | None = None,
        normalizes: bool = False,
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff: float = 0.5,
        transport=None,
    ) -> None:
        import httpx

        self.descriptor = EmbedderDescriptor(provider_name, dim, normalizes)
        self.endpoint = endpoint
        self.max_retries = max_retries
        self.backoff = backoff
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def embed_batch(self, texts: list[str]) -> list[list[float]]:
        import httpx

        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.endpoint, json={"texts": texts})
            except httpx.TransportError as exc:
                last = exc
                logger.warning("embedding request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransientError(f"embedding service returned HTTP {resp.status_code}")
                logger.warning("embedding request failed (attempt %d): HTTP %d", attempt + 1, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise ProviderContractError(f"embedding service rejected request: HTTP {resp.status_code}")
            try:
                vectors = resp.json()["vectors"]
            except (ValueError, KeyError, TypeError) as exc:
                raise ProviderContractError(f"malformed embedding response: {exc}") from None
            return vectors
        raise TransientError(f"embedding service unreachable after {self.max_retries + 1} attempts: {last}")

    def close(self) -> None:
        self._client.close()


class EmbeddingCache:
    """``(provider_name, text) -> vector`` store, persisted as JSON lines.

    Writes are serialised by a lock; reads are lock-free dictionary lookups.
    """

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path else None
        self._data: dict[tuple[str, str], np.ndarray] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._data[(rec["provider"], rec["text"])] = np.asarray(rec["vector"], dtype=np.float64)

    def __len__(self) -> int:
        return len(self._data)

    def get(self, provider: str, text: str, dim: int) -> np.ndarray | None:
        vec = self._data.get((provider, text))
        if vec is None or vec.shape != (dim,):
            return None
        return vec

    def put(self, provider: str, text: str, vec: np.ndarray) -> None:
        with self._lock:
            self._data[(provider, text)] = vec

    def save(self, path: str | Path | None = None) -> None:
        target = Path(path) if path else self.path
        if target is None:
            raise UsageError("embedding cache has no path to save to")
        with self._lock:
            items = sorted(self._data.items())
        tmp = target.with_suffix(target.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for (provider, text), vec in items:
                fh.write(json.dumps({"provider": provider, "text": text, "vector": vec.tolist()}, ensure_ascii=False))
                fh.write("\n")
        tmp.replace(target)


class Embedder:
    """Batching, caching and normalising front-end over a provider."""

    def __init__(
        self,
        provider: EmbeddingProvider,
        cache: EmbeddingCache | None = None,
        batch_size: int = DEFAULT_BATCH_SIZE,
        normalize_identifiers: bool = True,
    ) -> None:
        if batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        self.provider = provider
        self.cache = cache
        self.batch_size = batch_size
        self.normalize_identifiers = normalize_identifiers

    @property
    def descriptor(self) -> EmbedderDescriptor:
        return self.provider.descriptor

    def prepare(self, text: str) -> str:
        return identifier_to_phrase(text) if self.normalize_identifiers else text

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        """Embed ``texts`` into an ``(n, dim)`` array of unit vectors, order preserved."""
        if not texts:
            raise UsageError("embed_texts needs at least one text")
        for t in texts:
            if not t or not t.strip():
                raise UsageError("cannot embed a blank text")
        desc = self.descriptor
        prepared = [self.prepare(t) for t in texts]
        out = np.empty((len(prepared), desc.dim), dtype=np.float64)

        missing: dict[str, list[int]] = {}
        for i, text in enumerate(prepared):
            hit = self.cache.get(desc.provider_name, text, desc.dim) if self.cache else None
            if hit is not None:
                out[i] = hit
            else:
                missing.setdefault(text, []).append(i)

        pending = list(missing)
        for start in range(0, len(pending), self.batch_size):
            batch = pending[start : start + self.batch_size]
            try:
                raw = self.provider.embed_batch(batch)
            except TransientError as exc:
                raise TransientError(f"batch starting at {batch[0]!r} ({len(batch)} texts) failed: {exc}") from exc
            if len(raw) != len(batch):
                raise ProviderContractError(f"provider returned {len(raw)} vectors for {len(batch)} texts")
            for text, values in zip(batch, raw):
                vec = np.asarray(values, dtype=np.float64)
                if vec.shape != (desc.dim,):
                    raise ProviderContractError(
                        f"provider {desc.provider_name!r} declared dim {desc.dim}, returned {vec.shape}"
                    )
                if not np.all(np.isfinite(vec)):
                    raise ProviderContractError("provider returned non-finite values")
                if not desc.normalizes or abs(float(np.linalg.norm(vec)) - 1.0) > NORM_TOL:
                    vec = l2_normalize(vec)
                if self.cache is not None:
                    self.cache.put(desc.provider_name, text, vec)
                for i in missing[text]:
                    out[i] = vec
        return out

    def embed(self, text: str) -> np.ndarray:
        return self.embed_texts([text])[0]
