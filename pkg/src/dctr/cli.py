"""``dctr`` command line: ingest, index, retrieve, eval, ablate, stats and toyverse.

Exit codes: 0 success, 1 runtime failure (provider down, I/O), 2 validation
or usage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from .config import ENV_EMBED_TOKEN, ENV_LLM_TOKEN, EngineConfig, load_config, resolve_config
from .decomposition import DecompositionCache, Decomposer, HttpModelClient
from .embedding import DeterministicEmbedder, Embedder, EmbedderDescriptor, EmbeddingCache, HttpEmbedder
from .errors import DCTRError, DataError, FormatError, ParseError, StructuralError, UsageError
from .evaluation import (
    ablation_grid,
    ablation_sweep,
    case_to_dict,
    complexity_report,
    dataset_stats,
    load_cases,
    run_eval,
    rows_to_csv,
    validate_cases,
    write_csv,
    write_json,
    write_records,
    QueryCase,
)
from .index import IndexBundle, build_indices, load_index, persist_index
from .retrieval import METHODS, DCTRRetriever, RetrievalConfig, make_retriever
from .schema import Corpus, DatabaseSchema, load_spider_tables, schema_from_dict, schema_to_dict, validate_schema
from .synthetic import write_toyverse

logger = logging.getLogger("dctr")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
MAX_LISTED_VIOLATIONS = 20

CORPUS_FILE = "corpus.json"
CASES_FILE = "cases.jsonl"
VALIDATION_FILE = "validation.json"
INDEX_FILE = "index.bin"
EMBED_CACHE_FILE = "embeddings.jsonl"

_VALIDATION_ERRORS = (UsageError, StructuralError, DataError, FormatError, ParseError)


class ValidationFailed(DCTRError):
    def __init__(self, violations: list[str]) -> None:
        super().__init__(f"{len(violations)} validation problem(s)")
        self.violations = violations


# --- building blocks -----------------------------------------------------


def _dump(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def make_embedder(cfg: EngineConfig, index_dir: Path | None = None) -> Embedder:
    e = cfg.embedder
    if e.provider_name == "deterministic":
        provider = DeterministicEmbedder(dim=e.dim, seed=cfg.seed)
        cache = None
    else:
        provider = HttpEmbedder(
            e.endpoint, e.dim, provider_name=e.provider_name, token=os.environ.get(ENV_EMBED_TOKEN), normalizes=e.normalizes
        )
        cache = EmbeddingCache(index_dir / EMBED_CACHE_FILE if index_dir else None)
    return Embedder(provider, cache=cache, batch_size=e.batch)


def make_decomposer(cfg: EngineConfig) -> Decomposer:
    d = cfg.decomposer
    if d.fallback_only:
        return Decomposer()
    if not d.endpoint:
        raise UsageError("decomposer.fallback_only is false but no model endpoint is configured")
    client = HttpModelClient(d.endpoint, d.model_id, token=os.environ.get(ENV_LLM_TOKEN), max_concurrency=d.max_concurrency)
    return Decomposer(client=client, cache=DecompositionCache(d.cache_path))


def expected_descriptor(cfg: EngineConfig) -> EmbedderDescriptor:
    return EmbedderDescriptor(cfg.embedder.provider_name, cfg.embedder.dim, cfg.embedder.normalizes)


def load_bundle(corpus_dir: str | Path) -> tuple[Corpus, list[QueryCase]]:
    d = Path(corpus_dir)
    path = d / CORPUS_FILE
    if not path.exists():
        raise UsageError(f"{path} not found; run `dctr ingest` first")
    doc = json.loads(path.read_text(encoding="utf-8"))
    corpus = Corpus.from_schemas(schema_from_dict(s) for s in doc["databases"])
    cases = load_cases(d / CASES_FILE) if (d / CASES_FILE).exists() else []
    return corpus, cases


def open_index(cfg: EngineConfig) -> IndexBundle:
    if not cfg.index_dir:
        raise UsageError("--index-dir is required")
    path = Path(cfg.index_dir) / INDEX_FILE
    if not path.exists():
        raise UsageError(f"{path} not found; run `dctr index` first")
    return load_index(path, expected=expected_descriptor(cfg))


def _require_corpus(cfg: EngineConfig) -> str:
    if not cfg.corpus:
        raise UsageError("--corpus is required")
    return cfg.corpus


def _out_dir(cfg: EngineConfig) -> Path | None:
    if not cfg.out:
        return None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands ------------------------------------------------------------


def _read_schema_docs(paths: Sequence[str]) -> list[tuple[str, Any]]:
    docs = []
    for p in paths:
        try:
            doc = json.loads(Path(p).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read {p}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ValidationFailed([f"{p}: invalid JSON ({exc})"]) from None
        for i, item in enumerate(doc if isinstance(doc, list) else [doc]):
            docs.append((f"{p}[{i}]" if isinstance(doc, list) else p, item))
    return docs


def cmd_ingest(args: argparse.Namespace, cfg: EngineConfig) -> int:
    violations: list[str] = []
    schemas: list[DatabaseSchema] = []
    for source, doc in _read_schema_docs(args.schemas):
        try:
            schemas.append(schema_from_dict(doc))
        except (StructuralError, KeyError, TypeError) as exc:
            violations.append(f"{source}: {exc}")
    for p in args.spider or ():
        schemas.extend(load_spider_tables(p))

    seen_db: set[str] = set()
    valid: list[DatabaseSchema] = []
    for s in schemas:
        if s.id in seen_db:
            violations.append(f"duplicate database id {s.id!r}")
            continue
        seen_db.add(s.id)
        problems = validate_schema(s)
        violations.extend(problems)
        if not problems:
            valid.append(s)
    if not valid and not violations:
        violations.append("no schemas given")

    corpus = Corpus.from_schemas(valid) if valid else None
    cases: list[QueryCase] = []
    if args.cases:
        try:
            cases = load_cases(args.cases)
        except (DataError, UsageError) as exc:
            violations.append(str(exc))
        if corpus is not None:
            violations.extend(validate_cases(cases, corpus))

    if violations:
        raise ValidationFailed(violations)

    out = Path(args.out or cfg.corpus or "")
    if not str(out):
        raise UsageError("ingest needs --out (or --corpus) for the bundle directory")
    out.mkdir(parents=True, exist_ok=True)
    (out / CORPUS_FILE).write_text(
        _dump({"databases": [schema_to_dict(s) for s in corpus.schemas.values()]}), encoding="utf-8"
    )
    if args.cases:
        with open(out / CASES_FILE, "w", encoding="utf-8") as fh:
            for c in cases:
                fh.write(json.dumps(case_to_dict(c), ensure_ascii=False, sort_keys=True) + "\n")
    report = {"valid": True, "violations": [], "databases": len(corpus.schemas), "cases": len(cases)}
    (out / VALIDATION_FILE).write_text(_dump(report), encoding="utf-8")
    print(f"ingested {len(corpus.schemas)} database(s), {len(corpus.all_tables())} tables, {len(cases)} cases -> {out}")
    return EXIT_OK


def cmd_index(args: argparse.Namespace, cfg: EngineConfig) -> int:
    corpus, _ = load_bundle(_require_corpus(cfg))
    if not cfg.index_dir:
        raise UsageError("--index-dir is required")
    index_dir = Path(cfg.index_dir)
    path = index_dir / INDEX_FILE
    if path.exists() and not args.rebuild:
        try:
            load_index(path, expected=expected_descriptor(cfg))
        except FormatError as exc:
            raise UsageError(f"refusing to reuse {path}: {exc}; pass --rebuild to replace it") from None
    index_dir.mkdir(parents=True, exist_ok=True)
    embedder = make_embedder(cfg, index_dir)
    bundle = build_indices(corpus.schemas.values(), embedder)
    # persist_index writes to a temporary file and renames, so a failed build leaves nothing behind
    persist_index(bundle, path)
    if embedder.cache is not None:
        embedder.cache.save()
    print(f"indexed {len(bundle.tables)} table and {len(bundle.columns)} column entries (dim {bundle.descriptor.dim}) -> {path}")
    return EXIT_OK


def _retrievers(methods: Sequence[str], corpus: Corpus, bundle: IndexBundle, embedder: Embedder, dec: Decomposer, rcfg: RetrievalConfig):
    return [make_retriever(m, corpus, bundle, embedder, dec, rcfg) for m in methods]


def cmd_retrieve(args: argparse.Namespace, cfg: EngineConfig) -> int:
    corpus, bundle_cases = load_bundle(_require_corpus(cfg))
    if args.query and args.cases:
        raise UsageError("give either --query or --cases, not both")
    if args.query:
        queries = [("q1", args.query)]
    else:
        cases = load_cases(args.cases) if args.cases else bundle_cases
        if not cases:
            raise UsageError("nothing to retrieve: give --query or --cases")
        queries = [(c.query_id, c.query) for c in cases]
    bundle = open_index(cfg)
    embedder = make_embedder(cfg, Path(cfg.index_dir))
    (retriever,) = _retrievers([args.method or "dctr"], corpus, bundle, embedder, make_decomposer(cfg), cfg.retrieval)
    label = retriever.config.label() if isinstance(retriever, DCTRRetriever) else "baseline"

    lines = []
    for qid, q in queries:
        res = retriever.retrieve(q)
        rec: dict[str, Any] = {
            "query_id": qid,
            "method": retriever.method,
            "config": label,
            "ranked": [r.to_dict() for r in res.ranked],
        }
        if args.explain:
            rec["explain"] = res.explain()
        lines.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
    text = "\n".join(lines) + "\n"
    out = _out_dir(cfg)
    if out is not None:
        (out / "retrieval.jsonl").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _format_summary(rows: list[dict[str, Any]]) -> str:
    lines = [f"{'method':<8} {'config':<14} {'k':>3}  {'CR@k':>7}  {'std':>7}"]
    for r in rows:
        lines.append(f"{r['method']:<8} {r['config']:<14} {r['k']:>3}  {r['mean']:>7.4f}  {r['std']:>7.4f}")
    return "\n".join(lines)


def cmd_eval(args: argparse.Namespace, cfg: EngineConfig) -> int:
    corpus, cases = load_bundle(_require_corpus(cfg))
    if args.cases:
        cases = load_cases(args.cases)
    if not cases:
        raise UsageError("no evaluation cases in the corpus bundle and no --cases given")
    bundle = open_index(cfg)
    embedder = make_embedder(cfg, Path(cfg.index_dir))
    dec = make_decomposer(cfg)
    rcfg = cfg.retrieval
    k_max = cfg.eval.k_values[-1]
    if rcfg.k < k_max:
        logger.info("raising output length from %d to %d to score CR@%d", rcfg.k, k_max, k_max)
        rcfg = RetrievalConfig(**{**rcfg.to_dict(), "k": k_max})
    methods = args.method or list(METHODS)
    retrievers = _retrievers(methods, corpus, bundle, embedder, dec, rcfg)
    records, report = run_eval(cases, corpus, retrievers, dec, cfg.eval.k_values, cfg.eval.runs, cfg.jobs)

    summary_doc = {
        # paths and worker count are left out so reports from different output directories compare equal
        "config": {k: v for k, v in cfg.to_dict().items() if k not in ("corpus", "index_dir", "out", "jobs")}
        | {"retrieval": rcfg.to_dict()},
        "n_cases": report.n_cases,
        "runs": report.runs,
        "skipped": report.skipped,
        "summary": report.summary,
    }
    out = _out_dir(cfg)
    if out is not None:
        write_json(summary_doc, out / "summary.json")
        write_csv(report.summary, out / "summary.csv")
        write_csv(complexity_report(records, k=k_max), out / "complexity.csv")
        write_records(records, out / "records.jsonl")
    print(_format_summary(report.summary))
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def cmd_ablate(args: argparse.Namespace, cfg: EngineConfig) -> int:
    corpus, cases = load_bundle(_require_corpus(cfg))
    if args.cases:
        cases = load_cases(args.cases)
    if not cases:
        raise UsageError("no evaluation cases in the corpus bundle and no --cases given")
    bundle = open_index(cfg)
    embedder = make_embedder(cfg, Path(cfg.index_dir))
    dec = make_decomposer(cfg)
    r = cfg.retrieval
    k_max = cfg.eval.k_values[-1]
    expand = {"both": (False, True), "on": (True,), "off": (False,)}[args.expand]
    grid = ablation_grid(
        args.n_groups_grid,
        args.vote_k_grid,
        expand,
        first_stage_breadth=r.first_stage_breadth,
        k=max(r.k, k_max),
        clamp_negative=args.clamp or r.clamp_negative,
    )
    base = DCTRRetriever(corpus, bundle, embedder, dec, r)
    rows = ablation_sweep(cases, corpus, base, grid, cfg.eval.k_values, cfg.eval.runs, cfg.jobs)
    cols = ["n_groups", "vote_k", "expand_groups", "clamp_negative", "k", "mean", "std", "error"]
    out = _out_dir(cfg)
    if out is not None:
        write_csv(rows, out / "ablation.csv", cols)
        write_json({"cells": len(grid), "rows": rows}, out / "ablation.json")
    sys.stdout.write(rows_to_csv(rows, cols))
    failed = sum(1 for row in rows if row["error"])
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_stats(args: argparse.Namespace, cfg: EngineConfig) -> int:
    corpus, cases = load_bundle(_require_corpus(cfg))
    if args.cases:
        cases = load_cases(args.cases)
    stats = dataset_stats(corpus, cases)
    out = _out_dir(cfg)
    if out is not None:
        write_json(stats, out / "stats.json")
    for key, val in stats.items():
        print(f"{key:<20} {val:.2f}" if isinstance(val, float) else f"{key:<20} {val}")
    return EXIT_OK


def cmd_toyverse(args: argparse.Namespace, cfg: EngineConfig) -> int:
    out = Path(args.out or cfg.out or "toyverse")
    schema_paths, cases_path = write_toyverse(out, seed=args.seed if args.seed is not None else cfg.seed)
    print(f"wrote {len(schema_paths)} schema files and {cases_path}")
    return EXIT_OK


# --- argument parsing ----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON engine configuration")
    common.add_argument("--profile", help="named preset, e.g. paper-k10")
    common.add_argument("--corpus", help="corpus bundle directory (from `ingest`)")
    common.add_argument("--index-dir", help="directory holding the persisted index")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="seed for the deterministic embedder / generator")
    common.add_argument("--jobs", type=int, help="worker threads")
    common.add_argument("--provider", help="embedding provider name ('deterministic' or a remote name)")
    common.add_argument("--dim", type=int, help="embedding dimension")
    common.add_argument("-v", "--verbose", action="store_true")

    knobs = argparse.ArgumentParser(add_help=False)
    knobs.add_argument("--vote-k", type=int)
    knobs.add_argument("--n-groups", type=int)
    knobs.add_argument("--expand-groups", action="store_true", default=None)
    knobs.add_argument("--breadth", type=int, help="first-stage hits per component and index")
    knobs.add_argument("--k", type=int, help="number of tables returned")
    knobs.add_argument("--runs", type=int)
    knobs.add_argument("--k-values", type=_int_list, help="comma-separated cutoffs, e.g. 5,10,25")

    p = argparse.ArgumentParser(prog="dctr", description="Decomposition-based, connectivity-aware table retrieval.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="validate schemas and cases into a corpus bundle")
    s.add_argument("schemas", nargs="*", help="schema JSON files (one document or a list)")
    s.add_argument("--spider", action="append", help="Spider/BIRD tables.json")
    s.add_argument("--cases", help="cases JSONL")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("index", parents=[common], help="embed table and column names and persist the index")
    s.add_argument("--rebuild", action="store_true", help="replace an index built under another descriptor")
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("retrieve", parents=[common, knobs], help="rank tables for a query or a cases file")
    s.add_argument("--query")
    s.add_argument("--cases")
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--explain", action="store_true", help="include hits, groups and score breakdown")
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("eval", parents=[common, knobs], help="capped recall for one or more methods")
    s.add_argument("--cases")
    s.add_argument("--method", choices=METHODS, action="append", help="repeatable; default all methods")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common, knobs], help="sweep n_groups x vote_k x expansion")
    s.add_argument("--cases")
    s.add_argument("--n-groups-grid", type=_int_list, default=[1, 2, 3, 4, 5])
    s.add_argument("--vote-k-grid", type=_int_list, default=[1, 2, 3, 4, 5])
    s.add_argument("--expand", choices=("both", "on", "off"), default="both")
    s.add_argument("--clamp", action="store_true", help="clamp negative similarities to 0")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("stats", parents=[common], help="dataset characteristics")
    s.add_argument("--cases")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("toyverse", parents=[common], help="write the bundled synthetic benchmark")
    s.set_defaults(func=cmd_toyverse)
    return p


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "vote_k": get("vote_k"),
        "n_groups": get("n_groups"),
        "expand_groups": get("expand_groups"),
        "first_stage_breadth": get("breadth"),
        "k": get("k"),
        "runs": get("runs"),
        "k_values": get("k_values"),
        "provider": get("provider"),
        "dim": get("dim"),
        "corpus": get("corpus"),
        "index_dir": get("index_dir"),
        "out": get("out"),
        "seed": get("seed"),
        "jobs": get("jobs"),
    }


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(load_config(args.config), args.profile, _overrides(args))
        return args.func(args, cfg)
    except ValidationFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        for v in exc.violations[:MAX_LISTED_VIOLATIONS]:
            print(f"  - {v}", file=sys.stderr)
        if len(exc.violations) > MAX_LISTED_VIOLATIONS:
            print(f"  ... and {len(exc.violations) - MAX_LISTED_VIOLATIONS} more", file=sys.stderr)
        return EXIT_USAGE
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DCTRError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
