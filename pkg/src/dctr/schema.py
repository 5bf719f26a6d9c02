"""Relational schemas, foreign-key graphs and the graph operations used by retrieval.

Identifiers are plain strings. A table id is ``"<database>.<table>"`` and a
column id is ``"<database>.<table>.<column>"``; the helpers below build them so
that qualification stays total.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import DataError, StructuralError

logger = logging.getLogger(__name__)

DatabaseId = str
TableId = str
ColumnId = str


def table_id(database: DatabaseId, name: str) -> TableId:
    return f"{database}.{name}"


def column_id(table: TableId, name: str) -> ColumnId:
    return f"{table}.{name}"


@dataclass(frozen=True)
class ColumnDef:
    id: ColumnId
    name: str
    type_variants: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise StructuralError(f"column {self.id!r} has an empty name")


@dataclass(frozen=True)
class TableDef:
    id: TableId
    name: str
    columns: tuple[ColumnDef, ...] = ()

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise StructuralError(f"table {self.id!r} has an empty name")
        seen: set[str] = set()
        for col in self.columns:
            if col.id in seen:
                raise StructuralError(f"duplicate column {col.id!r} in table {self.id!r}")
            seen.add(col.id)


@dataclass(frozen=True)
class ForeignKeyEdge:
    """Undirected join edge; endpoints are stored in sorted order so equal pairs compare equal."""

    a: TableId
    b: TableId

    def __post_init__(self) -> None:
        if self.a == self.b:
            raise StructuralError(f"foreign key {self.a!r} -> {self.b!r} is a self-loop")
        if self.b < self.a:
            a, b = self.b, self.a
            object.__setattr__(self, "a", a)
            object.__setattr__(self, "b", b)


@dataclass(frozen=True)
class DatabaseSchema:
    id: DatabaseId
    tables: tuple[TableDef, ...]
    fks: tuple[ForeignKeyEdge, ...] = ()
    # number of FK declarations in the source, before direction/duplicate collapse
    declared_fks: int | None = None

    @property
    def table_ids(self) -> list[TableId]:
        return [t.id for t in self.tables]

    def n_declared_fks(self) -> int:
        return len(self.fks) if self.declared_fks is None else self.declared_fks


@dataclass(frozen=True)
class SchemaGraph:
    """Symmetric adjacency over the tables of one database."""

    database: DatabaseId
    adjacency: Mapping[TableId, frozenset[TableId]]

    @property
    def nodes(self) -> frozenset[TableId]:
        return frozenset(self.adjacency)

    def neighbors(self, node: TableId) -> frozenset[TableId]:
        try:
            return self.adjacency[node]
        except KeyError:
            raise StructuralError(f"table {node!r} is not in the graph of {self.database!r}") from None

    def edge_count(self) -> int:
        return sum(len(v) for v in self.adjacency.values()) // 2

    def edges(self) -> list[tuple[TableId, TableId]]:
        return sorted((u, v) for u, nbrs in self.adjacency.items() for v in nbrs if u < v)


def validate_schema(schema: DatabaseSchema) -> list[str]:
    """Return human-readable invariant violations; empty when the schema is valid."""
    problems: list[str] = []
    seen: set[TableId] = set()
    for t in schema.tables:
        if t.id in seen:
            problems.append(f"duplicate table id {t.id!r}")
        seen.add(t.id)
        if not t.id.startswith(schema.id + "."):
            problems.append(f"table {t.id!r} is not qualified by database {schema.id!r}")
    for fk in schema.fks:
        for end in (fk.a, fk.b):
            if end not in seen:
                problems.append(f"foreign key ({fk.a!r}, {fk.b!r}) references unknown table {end!r}")
    return problems


def build_schema_graph(schema: DatabaseSchema) -> SchemaGraph:
    known = set(schema.table_ids)
    adj: dict[TableId, set[TableId]] = {t: set() for t in schema.table_ids}
    for fk in schema.fks:
        if fk.a not in known or fk.b not in known:
            raise StructuralError(
                f"foreign key ({fk.a!r}, {fk.b!r}) references a table missing from {schema.id!r}"
            )
        adj[fk.a].add(fk.b)
        adj[fk.b].add(fk.a)
    return SchemaGraph(schema.id, {t: frozenset(n) for t, n in adj.items()})


def _check_nodes(graph: SchemaGraph, nodes: Iterable[TableId]) -> None:
    for n in nodes:
        if n not in graph.adjacency:
            raise StructuralError(f"table {n!r} is not in the graph of {graph.database!r}")


def connected_components(graph: SchemaGraph, nodes: Iterable[TableId]) -> list[set[TableId]]:
    """Components of the subgraph induced by ``nodes``.

    Edges to tables outside ``nodes`` are ignored. Output is ordered by size
    descending, then by smallest member id.
    """
    members = set(nodes)
    _check_nodes(graph, members)
    seen: set[TableId] = set()
    components: list[set[TableId]] = []
    for start in sorted(members):
        if start in seen:
            continue
        comp = {start}
        seen.add(start)
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in graph.adjacency[u]:
                if v in members and v not in seen:
                    seen.add(v)
                    comp.add(v)
                    queue.append(v)
        components.append(comp)
    components.sort(key=lambda c: (-len(c), min(c)))
    return components


def fk_expand_with_provenance(group: Iterable[TableId], graph: SchemaGraph) -> dict[TableId, TableId]:
    """One-hop expansion over the full graph.

    Returns ``{added_table: seed_table}`` for each table pulled in, where the
    seed is the smallest-id group member adjacent to it.
    """
    members = set(group)
    if not members:
        raise StructuralError("cannot expand an empty group")
    _check_nodes(graph, members)
    added: dict[TableId, TableId] = {}
    for seed in sorted(members):
        for nbr in graph.adjacency[seed]:
            if nbr not in members and nbr not in added:
                added[nbr] = seed
    return dict(sorted(added.items()))


def fk_expand(group: Iterable[TableId], graph: SchemaGraph) -> set[TableId]:
    members = set(group)
    return members | set(fk_expand_with_provenance(members, graph))


def gold_connectivity(gold: Iterable[TableId], graph: SchemaGraph) -> int:
    """Number of non-gold tables sharing a foreign key with some gold table."""
    gold = set(gold)
    for g in gold:
        if g not in graph.adjacency:
            raise DataError(f"gold table {g!r} is not in database {graph.database!r}")
    neighbours: set[TableId] = set()
    for g in gold:
        neighbours |= graph.adjacency[g]
    return len(neighbours - gold)


@dataclass
class Corpus:
    """All databases under retrieval, with their graphs built once."""

    schemas: dict[DatabaseId, DatabaseSchema]
    graphs: dict[DatabaseId, SchemaGraph] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._tables: dict[TableId, tuple[DatabaseId, TableDef]] = {}
        for db, schema in self.schemas.items():
            for t in schema.tables:
                self._tables[t.id] = (db, t)
            if db not in self.graphs:
                self.graphs[db] = build_schema_graph(schema)

    @classmethod
    def from_schemas(cls, schemas: Iterable[DatabaseSchema]) -> Corpus:
        out: dict[DatabaseId, DatabaseSchema] = {}
        for s in schemas:
            if s.id in out:
                raise StructuralError(f"duplicate database id {s.id!r}")
            out[s.id] = s
        return cls(dict(sorted(out.items())))

    @property
    def databases(self) -> list[DatabaseId]:
        return list(self.schemas)

    def has_table(self, tid: TableId) -> bool:
        return tid in self._tables

    def table(self, tid: TableId) -> TableDef:
        try:
            return self._tables[tid][1]
        except KeyError:
            raise DataError(f"unknown table {tid!r}") from None

    def database_of(self, tid: TableId) -> DatabaseId:
        try:
            return self._tables[tid][0]
        except KeyError:
            raise DataError(f"unknown table {tid!r}") from None

    def all_tables(self) -> list[TableDef]:
        return [t for s in self.schemas.values() for t in s.tables]


# --- ingestion -------------------------------------------------------------


def schema_from_dict(doc: Mapping[str, Any]) -> DatabaseSchema:
    """Parse one schema document.

    Expected layout::

        {"database_id": ..., "tables": [{"name": ..., "columns": [{"name": ..., "type_variants": [...]}]}],
         "foreign_keys": [{"from_table": ..., "to_table": ...}]}

    Foreign-key direction is dropped. Self-referencing keys carry no join
    information between tables and are skipped with a warning.
    """
    try:
        db = str(doc["database_id"])
        raw_tables = doc["tables"]
    except KeyError as exc:
        raise StructuralError(f"schema document is missing field {exc.args[0]!r}") from None
    if not db.strip():
        raise StructuralError("database_id is empty")

    tables = []
    for rt in raw_tables:
        tid = table_id(db, str(rt["name"]))
        cols = tuple(
            ColumnDef(
                id=column_id(tid, str(rc["name"])),
                name=str(rc["name"]),
                type_variants=tuple(str(v) for v in rc.get("type_variants", ()) or ()),
            )
            for rc in rt.get("columns", ())
        )
        tables.append(TableDef(id=tid, name=str(rt["name"]), columns=cols))

    raw_fks = doc.get("foreign_keys", ()) or ()
    edges: dict[tuple[str, str], ForeignKeyEdge] = {}
    for rf in raw_fks:
        a, b = table_id(db, str(rf["from_table"])), table_id(db, str(rf["to_table"]))
        if a == b:
            logger.warning("skipping self-referencing foreign key on %s", a)
            continue
        edge = ForeignKeyEdge(a, b)
        edges.setdefault((edge.a, edge.b), edge)
    return DatabaseSchema(
        id=db,
        tables=tuple(tables),
        fks=tuple(edges[k] for k in sorted(edges)),
        declared_fks=int(doc.get("declared_foreign_keys", len(raw_fks))),
    )


def schema_to_dict(schema: DatabaseSchema) -> dict[str, Any]:
    prefix = len(schema.id) + 1
    return {
        "database_id": schema.id,
        "tables": [
            {
                "name": t.name,
                "columns": [{"name": c.name, "type_variants": list(c.type_variants)} for c in t.columns],
            }
            for t in schema.tables
        ],
        "foreign_keys": [{"from_table": fk.a[prefix:], "to_table": fk.b[prefix:]} for fk in schema.fks],
        "declared_foreign_keys": schema.n_declared_fks(),
    }


def load_schema_file(path: str | Path) -> DatabaseSchema:
    with open(path, encoding="utf-8") as fh:
        return schema_from_dict(json.load(fh))


def load_spider_tables(path: str | Path) -> list[DatabaseSchema]:
    """Read a Spider/BIRD style ``tables.json`` (one entry per database).

    Foreign keys there are column-index pairs; they are lifted to table pairs.
    """
    with open(path, encoding="utf-8") as fh:
        entries = json.load(fh)
    schemas = []
    for entry in entries:
        db = entry["db_id"]
        names = entry.get("table_names_original") or entry["table_names"]
        cols = entry.get("column_names_original") or entry["column_names"]
        per_table: list[list[str]] = [[] for _ in names]
        for t_idx, cname in cols:
            if t_idx >= 0:
                per_table[t_idx].append(cname)
        doc = {
            "database_id": db,
            "tables": [
                {"name": n, "columns": [{"name": c} for c in dict.fromkeys(per_table[i])]}
                for i, n in enumerate(names)
            ],
            "foreign_keys": [
                {"from_table": names[cols[c1][0]], "to_table": names[cols[c2][0]]}
                for c1, c2 in entry.get("foreign_keys", [])
            ],
        }
        schemas.append(schema_from_dict(doc))
    return schemas
