"""Typed query decomposition into schema, value and aggregator components.

A remote language model does the decomposition when one is configured. Its
answers are cached on disk keyed by ``(model_id, prompt_hash)``. Whenever the
model is unavailable or unparseable, a rule-based decomposer takes over so a
result is always produced.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import re
import threading
import time
import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Protocol

from .errors import ParseError, ProviderContractError, TransientError, UsageError

logger = logging.getLogger(__name__)


class ComponentType(str, enum.Enum):
    SCHEMA = "schema"
    VALUE = "value"
    AGGREGATOR = "aggregator"


class DecompositionSource(str, enum.Enum):
    MODEL = "model"
    FALLBACK = "fallback"
    CACHE = "cache"


@dataclass(frozen=True)
class QueryComponent:
    name: str
    ctype: ComponentType
    description: str = ""

    def to_dict(self) -> dict[str, str]:
        return {"component_name": self.name, "component_description": self.description, "component_type": self.ctype.value}


@dataclass
class DecomposedQuery:
    query: str
    components: list[QueryComponent]
    source: DecompositionSource

    def by_type(self, ctype: ComponentType) -> list[QueryComponent]:
        return [c for c in self.components if c.ctype is ctype]


PROMPT_TEMPLATE = """\
---Goal---
Given a natural language query and a list of component types, identify all schema
element, value and aggregator components from the text.

---Output---
For each identified component, extract the following information:
- component_name: Name of the component, use exact phrase from the input query.
  Keep each as short and concise as possible.
- component_description: Short description of the component's attributes and any
  potential context that might be helpful for understanding the role of the component
  within the query.
- component_type: One of "schema", "value" or "aggregator".
Return a JSON list with one object per component, using the three keys above.

---Schema Element Component Description---
The specific data schema element (e.g. table or column names) directly referenced
in the query. Think about which parts of the query are most likely to have counterparts
in the available data, and explain why. Be as concise as possible, and shave any
constraints or filtering phrases surrounding the schema element component.

Note: Exclude phrases that are more likely to refer to specific cell values rather than
schema elements. Only focus on elements most likely to have matching schema entries.

---Value Component Description---
An entity or literal in the query (a name, place, date, number or quoted string) that
acts as a filter on cell values rather than naming a schema element.

---Aggregator Component Description---
An aggregation or comparison operation the query asks for (e.g. average, min, max,
count, highest).

---Examples---
{few_shot_examples}

---Real Data---
Input Query:
{query}

Output:
"""

_PLACEHOLDER_RE = re.compile(r"\{(few_shot_examples|query)\}")


@lru_cache(maxsize=1)
def few_shot_examples() -> str:
    raw = resources.files("dctr").joinpath("data/few_shot.json").read_text(encoding="utf-8")
    blocks = []
    for ex in json.loads(raw):
        blocks.append(
            "Input Query:\n"
            + ex["query"]
            + "\n\nOutput:\n"
            + json.dumps(ex["components"], ensure_ascii=False, indent=2)
        )
    return "\n\n".join(blocks)


def render_prompt(query: str) -> str:
    if not query or not query.strip():
        raise UsageError("cannot decompose a blank query")
    values = {"few_shot_examples": few_shot_examples(), "query": query}
    # single pass: substituted text is never re-scanned for placeholders
    return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], PROMPT_TEMPLATE)


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


# --- response parsing --------------------------------------------------------

_TYPE_LABELS = {
    "schema": ComponentType.SCHEMA,
    "schema element": ComponentType.SCHEMA,
    "schema_element": ComponentType.SCHEMA,
    "table": ComponentType.SCHEMA,
    "column": ComponentType.SCHEMA,
    "value": ComponentType.VALUE,
    "literal": ComponentType.VALUE,
    "entity": ComponentType.VALUE,
    "filter": ComponentType.VALUE,
    "aggregator": ComponentType.AGGREGATOR,
    "aggregation": ComponentType.AGGREGATOR,
    "operator": ComponentType.AGGREGATOR,
    "comparison": ComponentType.AGGREGATOR,
}

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)
_FIELD_RE = re.compile(r"^\s*[-*]?\s*(component_name|component_description|component_type)\s*:\s*(.*)$")


def _parse_type(label: Any) -> ComponentType:
    key = str(label or "").strip().lower()
    if key in _TYPE_LABELS:
        return _TYPE_LABELS[key]
    if key:
        logger.warning("unknown component type %r, treating as schema", label)
    return ComponentType.SCHEMA


def _json_entries(text: str) -> list[Any] | None:
    candidates = [m.group(1) for m in _FENCE_RE.finditer(text)] + [text]
    for cand in candidates:
        cand = cand.strip()
        for opener, closer in (("[", "]"), ("{", "}")):
            start, end = cand.find(opener), cand.rfind(closer)
            if start < 0 or end <= start:
                continue
            try:
                doc = json.loads(cand[start : end + 1])
            except json.JSONDecodeError:
                continue
            if isinstance(doc, dict):
                doc = doc.get("components", [doc] if "component_name" in doc else None)
            if isinstance(doc, list):
                return doc
    return None


def _line_entries(text: str) -> list[dict[str, str]]:
    entries: list[dict[str, str]] = []
    current: dict[str, str] = {}
    for line in text.splitlines():
        m = _FIELD_RE.match(line)
        if not m:
            continue
        key, val = m.group(1), m.group(2).strip().strip('"')
        if key == "component_name" and current:
            entries.append(current)
            current = {}
        current[key] = val
    if current:
        entries.append(current)
    return entries


def parse_decomposition_response(raw: str) -> list[QueryComponent]:
    """Parse a model answer: a JSON list of component objects, or ``key: value`` blocks."""
    if not raw or not raw.strip():
        raise ParseError("empty decomposition response")
    entries = _json_entries(raw)
    if entries is None:
        entries = _line_entries(raw)
        if not entries:
            raise ParseError(f"unparseable decomposition response: {raw[:80]!r}")

    components = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            logger.warning("dropping decomposition entry %d: not an object", i)
            continue
        name = str(entry.get("component_name") or entry.get("name") or "").strip()
        if not name:
            logger.warning("dropping decomposition entry %d: missing component_name", i)
            continue
        components.append(
            QueryComponent(
                name=name,
                ctype=_parse_type(entry.get("component_type", entry.get("type"))),
                description=str(entry.get("component_description") or entry.get("description") or ""),
            )
        )
    return components


def _squash(text: str) -> str:
    return " ".join(unicodedata.normalize("NFC", text).split())


def check_exact_phrases(query: str, components: list[QueryComponent]) -> list[str]:
    """Names that are not substrings of the query; reported, never dropped."""
    q = _squash(query)
    bad = [c.name for c in components if _squash(c.name) not in q]
    for name in bad:
        logger.warning("component %r is not an exact phrase of the query", name)
    return bad


# --- rule-based fallback ----------------------------------------------------

AGGREGATOR_WORDS = frozenset(
    {"average", "mean", "min", "max", "count", "sum", "total", "highest", "lowest", "most", "least", "top"}
)

STOP_WORDS = frozenset(
    """
    a an the and or but nor not no of in on at to from by for with without within into onto
    over under above below between among across through during before after since until
    about against per via as than then so too very also only just
    is are was were be been being am do does did done doing have has had having
    can could will would shall should may might must
    what which who whom whose when where why how whether
    this that these those there here it its it's they them their theirs we us our ours
    you your yours he him his she her hers i me my mine
    all any each every both either neither some such other another same own
    many much more few several
    show list give find get tell return display provide report fetch retrieve
    please i'd want need like know see look
    """.split()
)

_TOKEN_RE = re.compile(r"\d+(?:[.,]\d+)+|\w+(?:['’\-]\w+)*")
_NUMBER_RE = re.compile(r"^\d+(?:[.,]\d+)*$")
_QUOTE_RE = re.compile(r"\"([^\"]+)\"|“([^”]+)”|'([^']+)'")


def fallback_decompose(query: str) -> list[QueryComponent]:
    """Rule-based decomposition used when no model is available.

    Aggregator lexicon words become aggregators; numbers, quoted spans and
    runs of two or more capitalised words become values; every other
    non-stop-word becomes a schema component. Output follows query order,
    and repeated names are kept once.
    """
    if not query or not query.strip():
        raise UsageError("cannot decompose a blank query")
    found: list[tuple[int, QueryComponent]] = []
    taken = [False] * len(query)

    for m in _QUOTE_RE.finditer(query):
        g = next(i for i in (1, 2, 3) if m.group(i) is not None)
        s, e = m.start(g), m.end(g)
        if query[s:e].strip():
            found.append((s, QueryComponent(query[s:e], ComponentType.VALUE, "quoted literal")))
            for i in range(m.start(), m.end()):
                taken[i] = True

    tokens = [(m.start(), m.end(), m.group()) for m in _TOKEN_RE.finditer(query) if not taken[m.start()]]

    # capitalised runs: consecutive capitalised tokens separated by whitespace only
    used: set[int] = set()
    i = 0
    while i < len(tokens):
        j = i
        while (
            j < len(tokens)
            and tokens[j][2][0].isupper()
            and (j == i or query[tokens[j - 1][1] : tokens[j][0]].isspace())
        ):
            j += 1
        run = list(range(i, j))
        while run and tokens[run[0]][2].lower() in STOP_WORDS:
            run.pop(0)
        while run and tokens[run[-1]][2].lower() in STOP_WORDS:
            run.pop()
        if len(run) >= 2:
            s, e = tokens[run[0]][0], tokens[run[-1]][1]
            found.append((s, QueryComponent(query[s:e], ComponentType.VALUE, "named entity")))
            used.update(run)
        i = max(j, i + 1)

    for idx, (s, _e, tok) in enumerate(tokens):
        if idx in used:
            continue
        low = tok.lower()
        if _NUMBER_RE.match(tok):
            found.append((s, QueryComponent(tok, ComponentType.VALUE, "numeric literal")))
        elif low in AGGREGATOR_WORDS:
            found.append((s, QueryComponent(tok, ComponentType.AGGREGATOR, "aggregation operator")))
        elif low not in STOP_WORDS:
            found.append((s, QueryComponent(tok, ComponentType.SCHEMA, "schema term")))

    found.sort(key=lambda p: p[0])
    out: list[QueryComponent] = []
    seen: set[tuple[str, ComponentType]] = set()
    for _, comp in found:
        key = (comp.name.lower(), comp.ctype)
        if key not in seen:
            seen.add(key)
            out.append(comp)
    return out


def retrieval_components(d: DecomposedQuery) -> list[QueryComponent]:
    """Schema and value components; aggregators stay on ``d`` for downstream use."""
    return [c for c in d.components if c.ctype is not ComponentType.AGGREGATOR]


# --- model client and cache -----------------------------------------------


class ModelClient(Protocol):
    model_id: str

    def complete(self, prompt: str, decoding: dict[str, Any]) -> str: ...


class HttpModelClient:
    """Client for ``{model_id, prompt, decoding} -> {text}`` over HTTP."""

    def __init__(
        self,
        endpoint: str,
        model_id: str,
        token: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff: float = 1.0,
        max_concurrency: int = 4,
        transport=None,
    ) -> None:
        import httpx

        self.endpoint = endpoint
        self.model_id = model_id
        self.max_retries = max_retries
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_concurrency)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def complete(self, prompt: str, decoding: dict[str, Any]) -> str:
        import httpx

        body = {"model_id": self.model_id, "prompt": prompt, "decoding": decoding}
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self._client.post(self.endpoint, json=body)
            except httpx.TransportError as exc:
                last = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransientError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise ProviderContractError(f"model service rejected request: HTTP {resp.status_code}")
            try:
                return str(resp.json()["text"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ProviderContractError(f"malformed model response: {exc}") from None
        raise TransientError(f"model service unreachable after {self.max_retries + 1} attempts: {last}")

    def close(self) -> None:
        self._client.close()


class DecompositionCache:
    """Line-delimited JSON store of model decompositions.

    Records are ``{query, model_id, prompt_hash, components}``; an optional
    ``seed`` field separates runs made with sampling enabled.
    """

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path else None
        self._data: dict[tuple, list[QueryComponent]] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    key = (rec["model_id"], rec["prompt_hash"], rec.get("seed"))
                    self._data[key] = [
                        QueryComponent(c["component_name"], ComponentType(c["component_type"]), c.get("component_description", ""))
                        for c in rec["components"]
                    ]

    def __len__(self) -> int:
        return len(self._data)

    def get(self, model_id: str, phash: str, seed: int | None = None) -> list[QueryComponent] | None:
        hit = self._data.get((model_id, phash, seed))
        return list(hit) if hit is not None else None

    def put(self, query: str, model_id: str, phash: str, components: list[QueryComponent], seed: int | None = None) -> None:
        with self._lock:
            self._data[(model_id, phash, seed)] = list(components)
            if self.path:
                rec: dict[str, Any] = {
                    "query": query,
                    "model_id": model_id,
                    "prompt_hash": phash,
                    "components": [c.to_dict() for c in components],
                }
                if seed is not None:
                    rec["seed"] = seed
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


@dataclass
class Decomposer:
    """Model-backed decomposition with caching and rule-based failover.

    ``client=None`` means fallback-only operation.
    """

    client: ModelClient | None = None
    cache: DecompositionCache | None = None
    temperature: float = 0.0
    max_tokens: int = 1024
    parse_retries: int = 1
    stats: dict[str, int] = field(default_factory=lambda: {"model": 0, "cache": 0, "fallback": 0})

    def decompose(self, query: str, run: int = 0) -> DecomposedQuery:
        if not query or not query.strip():
            raise UsageError("cannot decompose a blank query")
        if self.client is None:
            return self._fallback(query)

        prompt = render_prompt(query)
        phash = prompt_hash(prompt)
        # with greedy decoding every run sees the same answer, so runs share cache entries
        seed = run if self.temperature > 0 else None
        model_id = self.client.model_id
        if self.cache is not None:
            hit = self.cache.get(model_id, phash, seed)
            if hit is not None:
                self.stats["cache"] += 1
                return DecomposedQuery(query, hit, DecompositionSource.CACHE)

        decoding: dict[str, Any] = {"temperature": self.temperature, "max_tokens": self.max_tokens}
        if seed is not None:
            decoding["seed"] = seed
        for attempt in range(self.parse_retries + 1):
            try:
                raw = self.client.complete(prompt, decoding)
                components = parse_decomposition_response(raw)
            except (TransientError, ProviderContractError) as exc:
                logger.warning("decomposition model failed for %r: %s", query, exc)
                break
            except ParseError as exc:
                logger.warning("decomposition parse failed for %r (attempt %d): %s", query, attempt + 1, exc)
                continue
            check_exact_phrases(query, components)
            if self.cache is not None:
                self.cache.put(query, model_id, phash, components, seed)
            self.stats["model"] += 1
            return DecomposedQuery(query, components, DecompositionSource.MODEL)
        return self._fallback(query)

    def _fallback(self, query: str) -> DecomposedQuery:
        self.stats["fallback"] += 1
        return DecomposedQuery(query, fallback_decompose(query), DecompositionSource.FALLBACK)


def decompose(
    query: str, client: ModelClient | None = None, cache: DecompositionCache | None = None
) -> DecomposedQuery:
    return Decomposer(client=client, cache=cache).decompose(query)
