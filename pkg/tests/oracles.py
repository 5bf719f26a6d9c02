"""Independent reference implementations used as test oracles.

Each one is written the slow, obvious way so that it shares no code path
with the library function it checks.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Iterable, Mapping, Sequence


def capped_recall_oracle(ranking: Sequence[str], gold: Iterable[str], k: int) -> float:
    gold = list(dict.fromkeys(gold))
    found = []
    for item in ranking[:k]:
        if item in gold and item not in found:
            found.append(item)
    return len(found) / min(k, len(gold))


def components_oracle(nodes: Iterable[str], edges: Iterable[tuple[str, str]]) -> set[frozenset[str]]:
    """Union-find over the subgraph induced by ``nodes``."""
    nodes = set(nodes)
    parent = {n: n for n in nodes}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges:
        if a in nodes and b in nodes:
            parent[find(a)] = find(b)
    groups: dict[str, set[str]] = {}
    for n in nodes:
        groups.setdefault(find(n), set()).add(n)
    return {frozenset(g) for g in groups.values()}


def expand_oracle(group: Iterable[str], edges: Iterable[tuple[str, str]]) -> set[str]:
    group = set(group)
    out = set(group)
    for a, b in edges:
        if a in group:
            out.add(b)
        if b in group:
            out.add(a)
    return out


def _dot(u: Sequence[float], v: Sequence[float]) -> float:
    return math.fsum(x * y for x, y in zip(u, v))


def group_score_oracle(
    tables: Sequence[str],
    component_vecs: Sequence[Sequence[float]],
    table_surfaces: Mapping[str, Sequence[Sequence[float]]],
    vote_k: int,
    clamp_negative: bool = False,
) -> float:
    """Sum over components of the best achievable total over any ``vote_k`` tables (exhaustive)."""
    total = 0.0
    m = min(vote_k, len(tables))
    for comp in component_vecs:
        sims = {}
        for t in tables:
            s = max(_dot(surf, comp) for surf in table_surfaces[t])
            s = min(1.0, max(-1.0, s))
            sims[t] = max(s, 0.0) if clamp_negative else s
        total += max(sum(sims[t] for t in subset) for subset in itertools.combinations(tables, m))
    return total


def knn_oracle(
    elements: Sequence[str], scores: Sequence[float], breadth: int
) -> list[tuple[str, float]]:
    """Max score per element, ranked by (score desc, element id)."""
    best: dict[str, float] = {}
    for el, s in zip(elements, scores):
        s = min(1.0, max(-1.0, float(s)))
        if el not in best or s > best[el]:
            best[el] = s
    return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:breadth]
