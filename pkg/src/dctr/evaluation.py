"""Capped recall, multi-run evaluation, complexity breakdowns, ablation grids and dataset statistics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Protocol

from .decomposition import DecomposedQuery, Decomposer, retrieval_components
from .errors import DataError, UsageError
from .retrieval import DCTRRetriever, RetrievalConfig, RetrievalResult
from .schema import Corpus, TableId, gold_connectivity, table_id

logger = logging.getLogger(__name__)

DEFAULT_K_VALUES = (5, 10, 25)


@dataclass(frozen=True)
class QueryCase:
    query_id: str
    query: str
    gold: frozenset[TableId]
    database_id: str | None = None

    def __post_init__(self) -> None:
        if not self.gold:
            raise UsageError(f"case {self.query_id!r} has an empty gold set")


def case_from_dict(doc: Mapping[str, Any]) -> QueryCase:
    """``{query_id, query, database_id?, gold_tables}``; bare gold names are qualified by ``database_id``."""
    db = doc.get("database_id")
    gold = []
    for g in doc["gold_tables"]:
        g = str(g)
        gold.append(table_id(db, g) if db and not g.startswith(f"{db}.") else g)
    return QueryCase(str(doc["query_id"]), str(doc["query"]), frozenset(gold), db)


def case_to_dict(case: QueryCase) -> dict[str, Any]:
    doc: dict[str, Any] = {"query_id": case.query_id, "query": case.query}
    if case.database_id is not None:
        doc["database_id"] = case.database_id
    doc["gold_tables"] = sorted(case.gold)
    return doc


def load_cases(path: str | Path) -> list[QueryCase]:
    cases = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                cases.append(case_from_dict(json.loads(line)))
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad case record ({exc})") from None
    return cases


def validate_cases(cases: Iterable[QueryCase], corpus: Corpus) -> list[str]:
    problems = []
    seen: set[str] = set()
    for c in cases:
        if c.query_id in seen:
            problems.append(f"duplicate query_id {c.query_id!r}")
        seen.add(c.query_id)
        if c.database_id is not None and c.database_id not in corpus.schemas:
            problems.append(f"case {c.query_id!r}: unknown database {c.database_id!r}")
        for g in sorted(c.gold):
            if not corpus.has_table(g):
                problems.append(f"case {c.query_id!r}: gold table {g!r} not in corpus")
    return problems


# --- metrics ---------------------------------------------------------------


def capped_recall(retrieved: Sequence[TableId], gold: Iterable[TableId], k: int) -> float:
    """``|top-k(retrieved) ∩ gold| / min(k, |gold|)``; duplicates in ``retrieved`` count once."""
    gold = set(gold)
    if not gold:
        raise UsageError("capped recall needs a non-empty gold set")
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    return len(set(retrieved[:k]) & gold) / min(k, len(gold))


def query_length(query: str) -> int:
    """Whitespace token count."""
    return len(query.split())


def case_connectivity(gold: Iterable[TableId], corpus: Corpus) -> int:
    by_db: dict[str, set[TableId]] = {}
    for g in gold:
        by_db.setdefault(corpus.database_of(g), set()).add(g)
    return sum(gold_connectivity(ts, corpus.graphs[db]) for db, ts in by_db.items())


# --- records and aggregation --------------------------------------------------


class Retriever(Protocol):
    method: str
    config: RetrievalConfig

    def retrieve(self, query: str, run: int = 0, decomposition: DecomposedQuery | None = None) -> RetrievalResult: ...


@dataclass
class EvalRecord:
    query_id: str
    method: str
    config: str
    run: int
    cr_at_k: dict[int, float]
    qlen_tokens: int
    n_components: int
    gold_size: int
    gold_connectivity: int
    decomposition_source: str
    retrieved: list[TableId] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["cr_at_k"] = {str(k): v for k, v in sorted(self.cr_at_k.items())}
        return d


@dataclass
class AggregateReport:
    # one row per (method, config, k): mean/std across runs of the per-run mean CR
    summary: list[dict[str, Any]]
    runs: int
    n_cases: int
    skipped: list[str] = field(default_factory=list)

    def lookup(self, method: str, k: int, config: str | None = None) -> dict[str, Any]:
        for row in self.summary:
            if row["method"] == method and row["k"] == k and (config is None or row["config"] == config):
                return row
        raise KeyError((method, config, k))


def config_label(retriever: Retriever) -> str:
    if isinstance(retriever, DCTRRetriever):
        return retriever.config.label()
    return "baseline"


def run_eval(
    cases: Sequence[QueryCase],
    corpus: Corpus,
    retrievers: Sequence[Retriever],
    decomposer: Decomposer,
    k_values: Sequence[int] = DEFAULT_K_VALUES,
    runs: int = 1,
    jobs: int = 1,
) -> tuple[list[EvalRecord], AggregateReport]:
    """Evaluate every retriever on every case, ``runs`` times.

    Each case is decomposed once per run and the decomposition is shared by all
    retrievers, so complexity attributes line up across methods. Cases with
    gold tables outside the corpus are skipped and listed in the report.
    """
    if runs < 1:
        raise UsageError("runs must be >= 1")
    if not retrievers:
        raise UsageError("no retrievers to evaluate")
    k_values = sorted(set(k_values))
    if not k_values or k_values[0] < 1:
        raise UsageError(f"bad k_values {k_values}")

    usable: list[QueryCase] = []
    skipped: list[str] = []
    for c in cases:
        missing = sorted(g for g in c.gold if not corpus.has_table(g))
        if missing:
            logger.warning("skipping case %s: gold tables not in corpus: %s", c.query_id, ", ".join(missing))
            skipped.append(c.query_id)
        else:
            usable.append(c)
    static = {c.query_id: (query_length(c.query), len(c.gold), case_connectivity(c.gold, corpus)) for c in usable}

    def one(case: QueryCase, run: int) -> list[EvalRecord]:
        decomposition = decomposer.decompose(case.query, run=run)
        n_comp = len(retrieval_components(decomposition))
        qlen, gsize, conn = static[case.query_id]
        out = []
        for r in retrievers:
            tables = r.retrieve(case.query, run=run, decomposition=decomposition).tables
            out.append(
                EvalRecord(
                    query_id=case.query_id,
                    method=r.method,
                    config=config_label(r),
                    run=run,
                    cr_at_k={k: capped_recall(tables, case.gold, k) for k in k_values},
                    qlen_tokens=qlen,
                    n_components=n_comp,
                    gold_size=gsize,
                    gold_connectivity=conn,
                    decomposition_source=decomposition.source.value,
                    retrieved=tables,
                )
            )
        return out

    records: list[EvalRecord] = []
    tasks = [(c, run) for run in range(runs) for c in usable]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for recs in pool.map(lambda t: one(*t), tasks):
                records.extend(recs)
    else:
        for c, run in tasks:
            records.extend(one(c, run))

    return records, aggregate(records, runs, len(usable), skipped)


def aggregate(records: Sequence[EvalRecord], runs: int, n_cases: int, skipped: Sequence[str] = ()) -> AggregateReport:
    cells: dict[tuple[str, str, int], dict[int, list[float]]] = {}
    for rec in records:
        for k, v in rec.cr_at_k.items():
            cells.setdefault((rec.method, rec.config, k), {}).setdefault(rec.run, []).append(v)
    summary = []
    for (method, cfg, k), per_run in sorted(cells.items()):
        means = [statistics.fmean(v) for _, v in sorted(per_run.items())]
        summary.append(
            {
                "method": method,
                "config": cfg,
                "k": k,
                "mean": statistics.fmean(means),
                # exact arithmetic: identical runs give exactly 0
                "std": statistics.pstdev(means) if len(means) > 1 else 0.0,
                "runs": len(means),
                "n_queries": len(next(iter(per_run.values()))),
            }
        )
    return AggregateReport(summary, runs, n_cases, list(skipped))


# --- complexity breakdowns -----------------------------------------------


@dataclass(frozen=True)
class Bin:
    label: str
    lo: int
    hi: int | None  # exclusive; None is unbounded

    def contains(self, value: int) -> bool:
        return value >= self.lo and (self.hi is None or value < self.hi)


def integer_bins(start: int, stop: int, width: int = 1) -> list[Bin]:
    """Bins of ``width`` from ``start`` up to ``stop``, then an open ``stop+`` bin."""
    bins = []
    for lo in range(start, stop, width):
        hi = min(lo + width, stop)
        bins.append(Bin(str(lo) if hi - lo == 1 else f"{lo}-{hi - 1}", lo, hi))
    bins.append(Bin(f"{stop}+", stop, None))
    return bins


AXES = {
    "qlen_tokens": "query length (tokens)",
    "n_components": "retrieval components",
    "gold_size": "gold tables",
    "gold_connectivity": "tables FK-connected to gold",
}

DEFAULT_BINS: dict[str, list[Bin]] = {
    "qlen_tokens": integer_bins(0, 80, 10),
    "n_components": integer_bins(0, 8),
    "gold_size": integer_bins(1, 6),
    "gold_connectivity": integer_bins(0, 10),
}


def complexity_report(
    records: Sequence[EvalRecord], bins: Mapping[str, Sequence[Bin]] | None = None, k: int = 25
) -> list[dict[str, Any]]:
    """Micro-averaged CR@k per (axis, bin, method, config); empty bins have ``count`` 0 and no mean."""
    if not records:
        raise UsageError("complexity report needs at least one record")
    bins = DEFAULT_BINS if bins is None else bins
    series = sorted({(r.method, r.config) for r in records})
    rows = []
    for axis, axis_bins in bins.items():
        for b in axis_bins:
            for method, cfg in series:
                vals = [
                    r.cr_at_k[k]
                    for r in records
                    if r.method == method and r.config == cfg and b.contains(getattr(r, axis))
                ]
                rows.append(
                    {
                        "axis": axis,
                        "bin": b.label,
                        "lo": b.lo,
                        "hi": b.hi,
                        "method": method,
                        "config": cfg,
                        "k": k,
                        "count": len(vals),
                        "mean_cr": statistics.fmean(vals) if vals else None,
                    }
                )
    return rows


# --- ablation -------------------------------------------------------------


def ablation_grid(
    n_groups: Iterable[int], vote_k: Iterable[int], expand: Iterable[bool] = (False, True), **fixed: Any
) -> list[RetrievalConfig]:
    return [
        RetrievalConfig(vote_k=v, n_groups=n, expand_groups=e, **fixed)
        for e in expand
        for n in n_groups
        for v in vote_k
    ]


def ablation_sweep(
    cases: Sequence[QueryCase],
    corpus: Corpus,
    base: DCTRRetriever,
    grid: Sequence[RetrievalConfig],
    k_values: Sequence[int] = (25,),
    runs: int = 1,
    jobs: int = 1,
) -> list[dict[str, Any]]:
    """One row per (config, k). A failing configuration yields a row with ``error`` set."""
    if not grid:
        raise UsageError("ablation grid is empty")
    rows = []
    for cfg in grid:
        head = {
            "n_groups": cfg.n_groups,
            "vote_k": cfg.vote_k,
            "expand_groups": cfg.expand_groups,
            "clamp_negative": cfg.clamp_negative,
        }
        try:
            _, report = run_eval(cases, corpus, [base.with_config(cfg)], base.decomposer, k_values, runs, jobs)
        except Exception as exc:  # one bad cell must not sink the sweep
            logger.exception("ablation cell %s failed", cfg.label())
            for k in k_values:
                rows.append({**head, "k": k, "mean": None, "std": None, "error": f"{type(exc).__name__}: {exc}"})
            continue
        for k in sorted(k_values):
            row = report.lookup("dctr", k)
            rows.append({**head, "k": k, "mean": row["mean"], "std": row["std"], "error": None})
    return rows


def ablation_matrix(rows: Sequence[Mapping[str, Any]], k: int, expand: bool) -> dict[tuple[int, int], float | None]:
    """``{(n_groups, vote_k): mean}`` slice of a sweep."""
    return {
        (r["n_groups"], r["vote_k"]): r["mean"]
        for r in rows
        if r["k"] == k and r["expand_groups"] == expand
    }


# --- dataset statistics ---------------------------------------------------


def dataset_stats(corpus: Corpus, cases: Sequence[QueryCase] = ()) -> dict[str, float | int]:
    """Benchmark characteristics row; query statistics are omitted when there are no cases."""
    n_db = len(corpus.schemas)
    tables = corpus.all_tables()
    n_tables = len(tables)
    n_cols = sum(len(t.columns) for t in tables)
    n_fks = sum(s.n_declared_fks() for s in corpus.schemas.values())
    stats: dict[str, float | int] = {}
    if cases:
        stats["queries"] = len(cases)
        stats["avg_query_words"] = statistics.fmean(query_length(c.query) for c in cases)
    stats.update(
        {
            "unique_dbs": n_db,
            "tables": n_tables,
            "columns": n_cols,
            "avg_tables_per_db": n_tables / n_db if n_db else 0.0,
            "avg_cols_per_table": n_cols / n_tables if n_tables else 0.0,
            "avg_fks_per_table": n_fks / n_tables if n_tables else 0.0,
        }
    )
    return stats


# --- report files ---------------------------------------------------------


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return str(v)


def rows_to_csv(rows: Sequence[Mapping[str, Any]], columns: Sequence[str] | None = None) -> str:
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(rows: Sequence[Mapping[str, Any]], path: str | Path, columns: Sequence[str] | None = None) -> None:
    Path(path).write_text(rows_to_csv(rows, columns), encoding="utf-8")


def write_json(doc: Any, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def write_records(records: Sequence[EvalRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
