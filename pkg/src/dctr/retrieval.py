"""Component-wise retrieval with FK-graph grouping, coverage scoring and group selection.

Pipeline per query:

1. decompose the query and keep its schema/value components;
2. first pass: per component and per database, top-``breadth`` table hits and
   top-``breadth`` column hits (mapped to parent tables), unioned;
3. group candidates into connected components of the FK subgraph they induce;
4. optionally expand each group by one FK hop over the full graph;
5. score each group as the sum over components of its top-``vote_k``
   component/table similarities;
6. keep the best ``n_groups`` groups per database and the ``vote_k`` tables
   of each with the highest coverage.

:func:`dense_baseline` is the single-vector comparison method.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from .decomposition import DecomposedQuery, Decomposer, QueryComponent, retrieval_components
from .embedding import Embedder
from .errors import InternalError, UsageError
from .index import IndexBundle, VectorIndex, map_columns_to_tables
from .schema import Corpus, DatabaseId, SchemaGraph, TableId, connected_components, fk_expand_with_provenance

logger = logging.getLogger(__name__)

DEFAULT_BREADTH = 30


@dataclass(frozen=True)
class RetrievalConfig:
    vote_k: int = 5
    n_groups: int = 5
    expand_groups: bool = False
    first_stage_breadth: int = DEFAULT_BREADTH
    k: int = 25
    # floor component/table similarities at zero before scoring
    clamp_negative: bool = False

    def __post_init__(self) -> None:
        for name in ("vote_k", "n_groups", "first_stage_breadth", "k"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise UsageError(f"{name} must be a positive integer, got {value!r}")

    def label(self) -> str:
        return f"n{self.n_groups}-v{self.vote_k}-{'exp' if self.expand_groups else 'noexp'}"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class TableGroup:
    database: DatabaseId
    tables: frozenset[TableId]
    seed_tables: frozenset[TableId]
    score: float = 0.0
    per_table_coverage: Mapping[TableId, float] = field(default_factory=dict)
    # table added by expansion -> the seed table whose FK pulled it in
    provenance: Mapping[TableId, TableId] = field(default_factory=dict)

    def sort_key(self) -> tuple:
        return (-self.score, -len(self.tables), min(self.tables))


@dataclass(frozen=True)
class RankedTable:
    table: TableId
    group_rank: int
    table_score: float
    group_score: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


# --- pipeline stages -------------------------------------------------------


def first_pass_hits(
    component_vecs: np.ndarray, indices: IndexBundle, breadth: int, databases: Iterable[DatabaseId] | None = None
) -> list[dict[DatabaseId, dict[str, list]]]:
    """Per component, per database: ``{"tables": [...hits], "columns": [...hits]}``."""
    if breadth < 1:
        raise UsageError(f"breadth must be >= 1, got {breadth}")
    dbs = list(databases) if databases is not None else indices.tables.databases
    out = []
    for vec in component_vecs:
        per_db = {}
        for db in dbs:
            per_db[db] = {
                "tables": indices.tables.knn(vec, breadth, db_filter=db),
                "columns": indices.columns.knn(vec, breadth, db_filter=db) if len(indices.columns) else [],
            }
        out.append(per_db)
    return out


def first_pass(
    component_vecs: np.ndarray, indices: IndexBundle, breadth: int, databases: Iterable[DatabaseId] | None = None
) -> dict[DatabaseId, set[TableId]]:
    """Union of per-component table hits and column-hit parents, keyed by database."""
    if len(component_vecs) == 0:
        raise UsageError("first pass needs at least one component")
    return _merge_hits(first_pass_hits(component_vecs, indices, breadth, databases))


def _merge_hits(hits: list[dict[DatabaseId, dict[str, list]]]) -> dict[DatabaseId, set[TableId]]:
    candidates: dict[DatabaseId, set[TableId]] = {}
    for per_db in hits:
        for db, h in per_db.items():
            found = {x.element for x in h["tables"]} | map_columns_to_tables(h["columns"])
            if found:
                candidates.setdefault(db, set()).update(found)
    return {db: candidates[db] for db in sorted(candidates)}


def form_groups(candidates: Mapping[DatabaseId, Iterable[TableId]], graphs: Mapping[DatabaseId, SchemaGraph]) -> list[TableGroup]:
    groups = []
    for db in sorted(candidates):
        for comp in connected_components(graphs[db], candidates[db]):
            members = frozenset(comp)
            groups.append(TableGroup(db, members, members))
    return groups


def expand_group(group: TableGroup, graph: SchemaGraph) -> TableGroup:
    """Add every table one FK hop from the seed tables; scores must be recomputed after."""
    added = fk_expand_with_provenance(group.seed_tables, graph)
    return replace(
        group,
        tables=group.seed_tables | frozenset(added),
        score=0.0,
        per_table_coverage={},
        provenance=added,
    )


def _similarity_matrix(
    tables: Sequence[TableId], component_vecs: np.ndarray, table_vecs: Mapping[TableId, np.ndarray]
) -> np.ndarray:
    """``(n_tables, n_components)`` cosine, each table at its best surface form."""
    comps = np.atleast_2d(np.asarray(component_vecs, dtype=np.float64))
    sims = np.empty((len(tables), comps.shape[0]))
    for i, t in enumerate(tables):
        try:
            surf = np.atleast_2d(table_vecs[t])
        except KeyError:
            raise InternalError(f"no embedding for table {t!r}; index and corpus disagree") from None
        sims[i] = (surf @ comps.T).max(axis=0)
    return np.clip(sims, -1.0, 1.0)


def score_group(
    group: TableGroup,
    component_vecs: np.ndarray,
    table_vecs: Mapping[TableId, np.ndarray],
    vote_k: int,
    clamp_negative: bool = False,
) -> TableGroup:
    """Group coverage: sum over components of the top-``vote_k`` table similarities.

    A table's own coverage is its similarity summed over all components.
    """
    if vote_k < 1:
        raise UsageError(f"vote_k must be >= 1, got {vote_k}")
    tables = sorted(group.tables)
    if len(component_vecs) == 0:
        return replace(group, score=0.0, per_table_coverage={t: 0.0 for t in tables})
    sims = _similarity_matrix(tables, component_vecs, table_vecs)
    if clamp_negative:
        sims = np.maximum(sims, 0.0)
    top = -np.sort(-sims, axis=0)[:vote_k]
    score = float(top.sum(axis=0).sum())
    coverage = {t: float(v) for t, v in zip(tables, sims.sum(axis=1))}
    return replace(group, score=score, per_table_coverage=coverage)


def final_select(groups: Iterable[TableGroup], config: RetrievalConfig) -> list[RankedTable]:
    by_db: dict[DatabaseId, list[TableGroup]] = {}
    for g in groups:
        by_db.setdefault(g.database, []).append(g)
    kept: list[TableGroup] = []
    for db in sorted(by_db):
        kept.extend(sorted(by_db[db], key=TableGroup.sort_key)[: config.n_groups])
    kept.sort(key=TableGroup.sort_key)

    ranked: list[RankedTable] = []
    seen: set[TableId] = set()
    for rank, g in enumerate(kept, start=1):
        chosen = sorted(g.tables, key=lambda t: (-g.per_table_coverage.get(t, 0.0), t))[: config.vote_k]
        for t in chosen:
            # expanded groups of one database may overlap; a table is listed once
            if t in seen:
                continue
            seen.add(t)
            ranked.append(RankedTable(t, rank, g.per_table_coverage.get(t, 0.0), g.score))
    return ranked[: config.k]


def dense_baseline(query: str, table_index: VectorIndex, embedder: Embedder, k: int) -> list[RankedTable]:
    """Full query as one vector against table-name vectors, top ``k`` per database, merged by score."""
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    qvec = embedder.embed(query)
    hits = []
    for db in table_index.databases:
        hits.extend(table_index.knn(qvec, k, db_filter=db))
    hits.sort(key=lambda h: (-h.score, h.element))
    return [RankedTable(h.element, i, h.score, h.score) for i, h in enumerate(hits[:k], start=1)]


# --- retrievers ------------------------------------------------------------


@dataclass
class RetrievalResult:
    query: str
    method: str
    ranked: list[RankedTable]
    decomposition: DecomposedQuery | None = None
    components: list[QueryComponent] = field(default_factory=list)
    candidates: dict[DatabaseId, set[TableId]] = field(default_factory=dict)
    groups: list[TableGroup] = field(default_factory=list)
    hits: list[dict] = field(default_factory=list)
    used_dense_fallback: bool = False

    @property
    def tables(self) -> list[TableId]:
        return [r.table for r in self.ranked]

    def explain(self, top_hits: int = 5) -> dict[str, Any]:
        out: dict[str, Any] = {"used_dense_fallback": self.used_dense_fallback}
        if self.decomposition is not None:
            out["decomposition"] = {
                "source": self.decomposition.source.value,
                "components": [c.to_dict() for c in self.decomposition.components],
            }
        out["component_hits"] = [
            {
                "component": comp.name,
                "databases": {
                    db: {
                        kind: [[h.element, round(h.score, 6)] for h in hits[kind][:top_hits]]
                        for kind in ("tables", "columns")
                    }
                    for db, hits in per_db.items()
                },
            }
            for comp, per_db in zip(self.components, self.hits)
        ]
        out["candidates"] = {db: sorted(ts) for db, ts in self.candidates.items()}
        out["groups"] = [
            {
                "database": g.database,
                "score": g.score,
                "tables": sorted(g.tables),
                "seed_tables": sorted(g.seed_tables),
                "expanded_from": dict(g.provenance),
                "coverage": {t: g.per_table_coverage[t] for t in sorted(g.per_table_coverage)},
            }
            for g in sorted(self.groups, key=TableGroup.sort_key)
        ]
        return out


class DenseRetriever:
    method = "dense"

    def __init__(self, indices: IndexBundle, embedder: Embedder, config: RetrievalConfig) -> None:
        self.indices = indices
        self.embedder = embedder
        self.config = config

    def retrieve(self, query: str, run: int = 0, decomposition: DecomposedQuery | None = None) -> RetrievalResult:
        ranked = dense_baseline(query, self.indices.tables, self.embedder, self.config.k)
        return RetrievalResult(query, self.method, ranked, decomposition)


class DCTRRetriever:
    method = "dctr"

    def __init__(
        self,
        corpus: Corpus,
        indices: IndexBundle,
        embedder: Embedder,
        decomposer: Decomposer,
        config: RetrievalConfig,
    ) -> None:
        self.corpus = corpus
        self.indices = indices
        self.embedder = embedder
        self.decomposer = decomposer
        self.config = config
        self._table_vecs = {t: indices.tables.surface_vectors(t) for t in indices.tables.elements}

    def with_config(self, config: RetrievalConfig) -> DCTRRetriever:
        clone = object.__new__(DCTRRetriever)
        clone.__dict__.update(self.__dict__)
        clone.config = config
        return clone

    def retrieve(self, query: str, run: int = 0, decomposition: DecomposedQuery | None = None) -> RetrievalResult:
        cfg = self.config
        if decomposition is None:
            decomposition = self.decomposer.decompose(query, run=run)
        components = retrieval_components(decomposition)
        if not components:
            ranked = dense_baseline(query, self.indices.tables, self.embedder, cfg.k)
            return RetrievalResult(query, self.method, ranked, decomposition, used_dense_fallback=True)

        vecs = self.embedder.embed_texts([c.name for c in components])
        hits = first_pass_hits(vecs, self.indices, cfg.first_stage_breadth)
        candidates = _merge_hits(hits)

        groups = form_groups(candidates, self.corpus.graphs)
        if cfg.expand_groups:
            groups = [expand_group(g, self.corpus.graphs[g.database]) for g in groups]
        groups = [score_group(g, vecs, self._table_vecs, cfg.vote_k, cfg.clamp_negative) for g in groups]
        ranked = final_select(groups, cfg)
        return RetrievalResult(query, self.method, ranked, decomposition, components, candidates, groups, hits)


METHODS = ("dctr", "dense")


def make_retriever(
    method: str,
    corpus: Corpus,
    indices: IndexBundle,
    embedder: Embedder,
    decomposer: Decomposer,
    config: RetrievalConfig,
) -> DCTRRetriever | DenseRetriever:
    if method == "dctr":
        return DCTRRetriever(corpus, indices, embedder, decomposer, config)
    if method == "dense":
        return DenseRetriever(indices, embedder, config)
    raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
