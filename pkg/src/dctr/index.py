"""Dense table-name and column-name indices with exact top-k search and a checksummed file format."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import Embedder, EmbedderDescriptor
from .errors import FormatError, UsageError
from .schema import DatabaseId, DatabaseSchema, TableId

FORMAT_VERSION = 1
MAGIC = b"DCTR-INDEX\n"


@dataclass(frozen=True)
class IndexEntry:
    element: str
    database: DatabaseId
    surface: str
    # parent table for column entries, None for table entries
    parent: TableId | None = None


@dataclass(frozen=True)
class SearchHit:
    element: str
    database: DatabaseId
    score: float
    surface: str
    parent: TableId | None = None


class VectorIndex:
    """Exact (full-scan) cosine index over unit vectors.

    An element may own several entries (surface forms); its score for a query
    is the best score over them.
    """

    def __init__(self, kind: str, entries: Sequence[IndexEntry], matrix: np.ndarray) -> None:
        matrix = np.ascontiguousarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(entries):
            raise UsageError(f"{len(entries)} entries but matrix of shape {matrix.shape}")
        self.kind = kind
        self.entries = tuple(entries)
        self.matrix = matrix
        self.elements = sorted({e.element for e in self.entries})
        code = {el: i for i, el in enumerate(self.elements)}
        self._codes = np.fromiter((code[e.element] for e in self.entries), dtype=np.int64, count=len(self.entries))
        self._elem_db = [""] * len(self.elements)
        self._elem_parent: list[TableId | None] = [None] * len(self.elements)
        db_rows: dict[DatabaseId, list[int]] = {}
        self._elem_rows: dict[str, list[int]] = {}
        for row, e in enumerate(self.entries):
            c = code[e.element]
            self._elem_db[c] = e.database
            self._elem_parent[c] = e.parent
            db_rows.setdefault(e.database, []).append(row)
            self._elem_rows.setdefault(e.element, []).append(row)
        self._db_rows = {db: np.asarray(rows, dtype=np.int64) for db, rows in sorted(db_rows.items())}
        self._all_rows = np.arange(len(self.entries), dtype=np.int64)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def databases(self) -> list[DatabaseId]:
        return list(self._db_rows)

    def __len__(self) -> int:
        return len(self.entries)

    def surface_vectors(self, element: str) -> np.ndarray:
        try:
            return self.matrix[self._elem_rows[element]]
        except KeyError:
            raise KeyError(f"{element!r} is not in the {self.kind} index") from None

    def parent_of(self, element: str) -> TableId | None:
        rows = self._elem_rows.get(element)
        if not rows:
            raise KeyError(f"{element!r} is not in the {self.kind} index")
        return self.entries[rows[0]].parent

    def _rows(self, db_filter: DatabaseId | None) -> np.ndarray:
        if db_filter is None:
            return self._all_rows
        return self._db_rows.get(db_filter, np.empty(0, dtype=np.int64))

    def _check(self, query_vec: np.ndarray) -> np.ndarray:
        q = np.asarray(query_vec, dtype=np.float64)
        if q.shape != (self.dim,):
            raise UsageError(f"query has shape {q.shape}, index dim is {self.dim}")
        return q

    def _best(self, q: np.ndarray, db_filter: DatabaseId | None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-element best score: returns (element codes, scores, best entry row), codes ascending."""
        rows = self._rows(db_filter)
        if rows.size == 0:
            empty = np.empty(0, dtype=np.int64)
            return empty, np.empty(0), empty
        scores = np.clip(self.matrix[rows] @ q, -1.0, 1.0)
        codes = self._codes[rows]
        # sort by code asc, then score desc; first row of each code run is that element's best entry
        order = np.lexsort((-scores, codes))
        sorted_codes = codes[order]
        first = np.ones(order.size, dtype=bool)
        first[1:] = sorted_codes[1:] != sorted_codes[:-1]
        pick = order[first]
        return codes[pick], scores[pick], rows[pick]

    def element_scores(self, query_vec: np.ndarray, db_filter: DatabaseId | None = None) -> dict[str, float]:
        q = self._check(query_vec)
        codes, scores, _ = self._best(q, db_filter)
        return {self.elements[c]: float(s) for c, s in zip(codes, scores)}

    def knn(self, query_vec: np.ndarray, breadth: int, db_filter: DatabaseId | None = None) -> list[SearchHit]:
        """Top-``breadth`` elements by cosine, ties broken by element id."""
        if breadth < 1:
            raise UsageError(f"breadth must be >= 1, got {breadth}")
        q = self._check(query_vec)
        codes, scores, rows = self._best(q, db_filter)
        top = np.lexsort((codes, -scores))[:breadth]
        hits = []
        for i in top:
            c = int(codes[i])
            hits.append(
                SearchHit(
                    element=self.elements[c],
                    database=self._elem_db[c],
                    score=float(scores[i]),
                    surface=self.entries[int(rows[i])].surface,
                    parent=self._elem_parent[c],
                )
            )
        return hits


def map_columns_to_tables(hits: Iterable[SearchHit]) -> set[TableId]:
    out: set[TableId] = set()
    for h in hits:
        if h.parent is None:
            raise UsageError(f"hit {h.element!r} is not a column hit")
        out.add(h.parent)
    return out


@dataclass
class IndexBundle:
    """The table index and column index built under one embedder."""

    descriptor: EmbedderDescriptor
    tables: VectorIndex
    columns: VectorIndex
    build_timestamp: int = 0


def build_indices(
    schemas: Iterable[DatabaseSchema], embedder: Embedder, build_timestamp: int | None = None
) -> IndexBundle:
    """Embed every table name and every column surface form (name plus type variants)."""
    table_entries: list[IndexEntry] = []
    column_entries: list[IndexEntry] = []
    for schema in schemas:
        for t in schema.tables:
            table_entries.append(IndexEntry(t.id, schema.id, t.name))
            for c in t.columns:
                for surface in dict.fromkeys((c.name, *c.type_variants)):
                    column_entries.append(IndexEntry(c.id, schema.id, surface, parent=t.id))
    if not table_entries:
        raise UsageError("cannot build indices over an empty corpus")

    texts = [e.surface for e in table_entries] + [e.surface for e in column_entries]
    vectors = embedder.embed_texts(texts)
    n_t = len(table_entries)
    dim = embedder.descriptor.dim
    col_matrix = vectors[n_t:] if column_entries else np.empty((0, dim))

    if build_timestamp is None:
        build_timestamp = _default_timestamp(embedder.descriptor)
    return IndexBundle(
        descriptor=embedder.descriptor,
        tables=VectorIndex("table", table_entries, vectors[:n_t]),
        columns=VectorIndex("column", column_entries, col_matrix),
        build_timestamp=build_timestamp,
    )


def _default_timestamp(desc: EmbedderDescriptor) -> int:
    # reproducible builds: honour SOURCE_DATE_EPOCH, and keep deterministic-provider builds byte-stable
    env = os.environ.get("SOURCE_DATE_EPOCH")
    if env:
        return int(env)
    if desc.provider_name == "deterministic":
        return 0
    return int(time.time())


def _entries_to_json(entries: Sequence[IndexEntry]) -> list[list]:
    return [[e.element, e.database, e.surface, e.parent] for e in entries]


def persist_index(bundle: IndexBundle, path: str | Path) -> None:
    """Write both indices into one checksummed file; the target is replaced atomically."""
    meta = json.dumps(
        {"tables": _entries_to_json(bundle.tables.entries), "columns": _entries_to_json(bundle.columns.entries)},
        ensure_ascii=False,
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    payload = b"".join(
        [
            struct.pack("<Q", len(meta)),
            meta,
            bundle.tables.matrix.astype("<f8").tobytes(),
            bundle.columns.matrix.astype("<f8").tobytes(),
        ]
    )
    d = bundle.descriptor
    header = {
        "format_version": FORMAT_VERSION,
        "provider_name": d.provider_name,
        "dim": d.dim,
        "normalizes": d.normalizes,
        "build_timestamp": bundle.build_timestamp,
        "n_table_entries": len(bundle.tables),
        "n_column_entries": len(bundle.columns),
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)
    tmp.replace(path)


def load_index(path: str | Path, expected: EmbedderDescriptor | None = None) -> IndexBundle:
    """Read a file written by :func:`persist_index`.

    Raises :class:`FormatError` on corruption, or when ``expected`` names a
    different provider or dimension than the file was built with.
    """
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read index file {path}: {exc}") from None
    if not data.startswith(MAGIC):
        raise FormatError(f"{path} is not an index file (bad magic)")
    nl = data.find(b"\n", len(MAGIC))
    if nl < 0:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[len(MAGIC) : nl])
        found = EmbedderDescriptor(header["provider_name"], int(header["dim"]), bool(header["normalizes"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: format_version {header.get('format_version')}, expected {FORMAT_VERSION}")
    if expected is not None and (expected.provider_name, expected.dim) != (found.provider_name, found.dim):
        raise FormatError(
            f"{path}: built with provider={found.provider_name!r} dim={found.dim}, "
            f"config expects provider={expected.provider_name!r} dim={expected.dim}"
        )
    payload = data[nl + 1 :]
    if len(payload) != header.get("payload_bytes"):
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header says {header.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise FormatError(f"{path}: checksum mismatch")

    (meta_len,) = struct.unpack_from("<Q", payload, 0)
    meta = json.loads(payload[8 : 8 + meta_len])
    offset = 8 + meta_len
    dim = found.dim

    def take(n_rows: int) -> np.ndarray:
        nonlocal offset
        size = n_rows * dim * 8
        arr = np.frombuffer(payload, dtype="<f8", count=n_rows * dim, offset=offset).reshape(n_rows, dim)
        offset += size
        return arr.astype(np.float64)

    t_entries = [IndexEntry(*row) for row in meta["tables"]]
    c_entries = [IndexEntry(*row) for row in meta["columns"]]
    tables = VectorIndex("table", t_entries, take(len(t_entries)))
    columns = VectorIndex("column", c_entries, take(len(c_entries)))
    return IndexBundle(found, tables, columns, int(header["build_timestamp"]))
