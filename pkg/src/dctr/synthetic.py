"""The bundled "toyverse" benchmark: three small databases with planted FK structure and graded queries.

Everything is generated from a seeded :class:`random.Random`, so the same seed
always yields the same schemas and cases. Query families:

* single-table lookups ("Show all the venues.") on weakly connected tables;
* two/three-component queries over a joined pair or triple;
* verbose multi-constraint queries naming three to five joined tables in a
  densely connected cluster, plus literal filters and an aggregator.
"""

from __future__ import annotations

import json
import random
from pathlib import Path
from typing import Any

DOMAINS: dict[str, list[str]] = {
    "sports": [
        "player", "team", "match", "venue", "season", "league", "coach", "referee", "jersey", "sale",
        "ticket", "sponsor", "injury", "transfer", "stadium", "fan", "broadcast", "goal", "card", "lineup",
        "trophy", "agent", "contract", "scout", "academy", "kit", "merchandise", "attendance", "fixture", "standing",
        "award", "physio", "training", "drill", "supporter", "mascot", "pitch", "tournament", "draft", "roster",
    ],
    "retail": [
        "customer", "order", "product", "supplier", "warehouse", "shipment", "invoice", "payment", "refund", "coupon",
        "category", "brand", "review", "cart", "wishlist", "store", "employee", "shift", "promotion", "inventory",
        "carrier", "return", "voucher", "loyalty", "address", "region", "courier", "pallet", "barcode", "discount",
        "vendor", "catalog", "basket", "receipt", "subscription", "complaint", "rating", "manager", "checkout", "parcel",
    ],
    "health": [
        "patient", "doctor", "nurse", "ward", "hospital", "appointment", "prescription", "medication", "diagnosis", "allergy",
        "surgery", "insurance", "claim", "bed", "admission", "discharge", "laboratory", "specimen", "vaccine", "clinic",
        "therapist", "symptom", "treatment", "referral", "pharmacy", "dosage", "billing", "visit", "radiology", "scan",
        "procedure", "department", "consultation", "ambulance", "donor", "transfusion", "biopsy", "triage", "implant", "copayment",
    ],
}

ATTRIBUTES = [
    "amount", "date", "status", "code", "price", "quantity", "level", "title", "notes",
    "start_date", "end_date", "total_cost", "created_at", "updated_at", "is_active", "score",
]

# cluster layout per database: (size, extra_edges) where extra edges densify a spanning tree
CLUSTERS = [(8, 6), (7, 5), (5, 1), (4, 0), (3, 0), (3, 0), (2, 0), (2, 0), (1, 0), (1, 0), (1, 0), (1, 0), (1, 0), (1, 0)]

FIRST_NAMES = ["Maria", "Jonas", "Aisha", "Pedro", "Lena", "Tomasz", "Yuki", "Omar", "Ingrid", "Kofi"]
LAST_NAMES = ["Santos", "Berg", "Okafor", "Nowak", "Tanaka", "Haddad", "Larsen", "Mensah", "Rossi", "Dubois"]

SINGLE_TEMPLATES = ["Show all the {a}s.", "List every {a}.", "Which {a}s are there?"]
PAIR_TEMPLATES = [
    "Show the {a} of each {b}.",
    "List the {a}s for every {b} in {year}.",
    "Which {a} has the {agg} {b}?",
]
MULTI_TEMPLATES = [
    "What was the {agg} {a} of the {b}s with a {c} and {d} for {name} during {year}, and how does it compare to {other}?",
    "For each {b} that had a {c}, what is the {agg} {a} of all {d}s linked to {name} in {year} and after {other}?",
    "Please show the {agg} {a} for {name}, broken down by {b} and {c}, where the {d} was recorded in {year} or {other}.",
]


def _cluster_edges(rng: random.Random, members: list[str], extra: int) -> set[tuple[str, str]]:
    edges: set[tuple[str, str]] = set()
    for i in range(1, len(members)):
        j = rng.randrange(i)
        edges.add(tuple(sorted((members[i], members[j]))))
    possible = [tuple(sorted((a, b))) for i, a in enumerate(members) for b in members[i + 1 :]]
    rng.shuffle(possible)
    for e in possible:
        if extra <= 0:
            break
        if e not in edges:
            edges.add(e)
            extra -= 1
    return edges


def _connected_subset(rng: random.Random, members: list[str], edges: set[tuple[str, str]], size: int) -> list[str]:
    adj: dict[str, set[str]] = {m: set() for m in members}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    chosen = [rng.choice(members)]
    while len(chosen) < size:
        frontier = sorted({n for c in chosen for n in adj[c]} - set(chosen))
        if not frontier:
            break
        chosen.append(rng.choice(frontier))
    return chosen


def _plural(word: str) -> str:
    if word.endswith("y") and word[-2] not in "aeiou":
        return word[:-1] + "ie"
    if word.endswith(("s", "sh", "ch", "x")):
        return word + "e"
    return word


def toyverse(seed: int = 0) -> tuple[list[dict[str, Any]], list[dict[str, Any]]]:
    """Return ``(schema_documents, cases)`` in the ingestion formats."""
    rng = random.Random(seed)
    schemas: list[dict[str, Any]] = []
    cases: list[dict[str, Any]] = []

    for db, nouns in DOMAINS.items():
        names = list(nouns)
        rng.shuffle(names)
        clusters: list[tuple[list[str], set[tuple[str, str]]]] = []
        pos = 0
        for size, extra in CLUSTERS:
            members = names[pos : pos + size]
            pos += size
            clusters.append((members, _cluster_edges(rng, members, extra)))
        assert pos == len(names)

        fk_pairs = sorted(e for _, edges in clusters for e in edges)
        fk_cols: dict[str, list[str]] = {n: [] for n in names}
        for a, b in fk_pairs:
            fk_cols[a].append(f"{b}_id")
        tables = []
        for n in sorted(names):
            attrs = rng.sample(ATTRIBUTES, rng.randint(2, 4))
            cols = [f"{n}_id", *fk_cols[n], *attrs]
            tables.append({"name": n, "columns": [{"name": c, "type_variants": []} for c in cols]})
        schemas.append(
            {
                "database_id": db,
                "tables": tables,
                "foreign_keys": [{"from_table": a, "to_table": b} for a, b in fk_pairs],
            }
        )

        dense = [c for c in clusters if len(c[0]) >= 5]
        small = [c for c in clusters if 2 <= len(c[0]) <= 3]
        singles = [c[0][0] for c in clusters if len(c[0]) == 1]

        def case(query: str, gold: list[str], family: str) -> None:
            cases.append(
                {
                    "query_id": f"{db}-{len([c for c in cases if c['database_id'] == db]) + 1:02d}",
                    "query": query,
                    "database_id": db,
                    "gold_tables": sorted(gold),
                    "family": family,
                }
            )

        for i in range(7):
            t = singles[i % len(singles)] if i < len(singles) else rng.choice(small)[0][0]
            tpl = SINGLE_TEMPLATES[i % len(SINGLE_TEMPLATES)]
            word = _plural(t) if "{a}s" in tpl else t
            case(tpl.replace("{a}s", word + "s").replace("{a}", word), [t], "single")

        for i in range(3):
            members, edges = small[i % len(small)]
            a, b = _connected_subset(rng, members, edges, 2)
            tpl = PAIR_TEMPLATES[i % len(PAIR_TEMPLATES)]
            q = tpl.format(a=a, b=b, year=rng.randint(2015, 2024), agg=rng.choice(["highest", "lowest", "total"]))
            case(q, [a, b], "pair")

        for i in range(10):
            members, edges = dense[i % len(dense)]
            size = 4 if i % 3 else 3
            gold = _connected_subset(rng, members, edges, size)
            slots = dict(zip("abcd", gold + gold[:1] * (4 - len(gold))))
            tpl = MULTI_TEMPLATES[i % len(MULTI_TEMPLATES)]
            q = tpl.format(
                **slots,
                agg=rng.choice(["average", "total", "highest", "lowest"]),
                name=f"{rng.choice(FIRST_NAMES)} {rng.choice(LAST_NAMES)}",
                year=rng.randint(2015, 2024),
                other=rng.randint(2015, 2024),
            )
            case(q, gold, "multi")

    return schemas, cases


def write_toyverse(out_dir: str | Path, seed: int = 0) -> tuple[list[Path], Path]:
    """Write one schema file per database plus ``cases.jsonl``; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schemas, cases = toyverse(seed)
    schema_paths = []
    for doc in schemas:
        p = out / f"{doc['database_id']}.schema.json"
        p.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        schema_paths.append(p)
    cases_path = out / "cases.jsonl"
    with open(cases_path, "w", encoding="utf-8") as fh:
        for c in cases:
            fh.write(json.dumps(c, ensure_ascii=False) + "\n")
    return schema_paths, cases_path
