from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dctr.decomposition import DecomposedQuery, DecompositionSource, QueryComponent, ComponentType
from dctr.errors import InternalError, UsageError
from dctr.retrieval import (
    RetrievalConfig,
    TableGroup,
    dense_baseline,
    final_select,
    first_pass,
    form_groups,
    make_retriever,
    score_group,
)
from dctr.schema import build_schema_graph, schema_from_dict
from oracles import group_score_oracle


def unit_rows(rng, n, dim):
    m = rng.normal(size=(n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


@st.composite
def scoring_instances(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    n_tables = draw(st.integers(1, 8))
    n_comp = draw(st.integers(0, 5))
    vote_k = draw(st.integers(1, 5))
    clamp = draw(st.booleans())
    rng = np.random.default_rng(seed)
    tables = [f"d.t{i}" for i in range(n_tables)]
    surfaces = {t: unit_rows(rng, int(rng.integers(1, 3)), 6) for t in tables}
    comps = unit_rows(rng, n_comp, 6) if n_comp else np.empty((0, 6))
    return tables, surfaces, comps, vote_k, clamp


@settings(max_examples=200, deadline=None)
@given(scoring_instances())
def test_score_group_matches_exhaustive_oracle(inst):
    tables, surfaces, comps, vote_k, clamp = inst
    group = TableGroup("d", frozenset(tables), frozenset(tables))
    got = score_group(group, comps, surfaces, vote_k, clamp)
    assert got.score == pytest.approx(group_score_oracle(tables, comps, surfaces, vote_k, clamp), abs=1e-9)
    for t in tables:
        expected = sum(
            max(0.0, max(s @ c for s in surfaces[t])) if clamp else max(s @ c for s in surfaces[t]) for c in comps
        )
        assert got.per_table_coverage[t] == pytest.approx(expected, abs=1e-9)


def test_score_group_is_monotone_in_vote_k_when_clamped():
    rng = np.random.default_rng(3)
    tables = [f"d.t{i}" for i in range(6)]
    surfaces = {t: unit_rows(rng, 1, 5) for t in tables}
    comps = unit_rows(rng, 3, 5)
    g = TableGroup("d", frozenset(tables), frozenset(tables))
    scores = [score_group(g, comps, surfaces, v, True).score for v in range(1, 8)]
    assert scores == sorted(scores)


def test_score_group_missing_table_vector():
    g = TableGroup("d", frozenset({"d.a"}), frozenset({"d.a"}))
    with pytest.raises(InternalError):
        score_group(g, np.ones((1, 2)) / np.sqrt(2), {}, 1)
    with pytest.raises(UsageError):
        score_group(g, np.ones((1, 2)), {"d.a": np.ones(2)}, 0)


def _g(db, tables, score, coverage):
    ts = frozenset(tables)
    return TableGroup(db, ts, ts, score, dict(coverage))


def test_final_select_orders_and_truncates():
    groups = [
        _g("a", ["a.x", "a.y", "a.z"], 3.0, {"a.x": 0.5, "a.y": 0.9, "a.z": 0.9}),
        _g("a", ["a.p"], 1.0, {"a.p": 1.0}),
        _g("b", ["b.q", "b.r"], 2.0, {"b.q": 0.1, "b.r": 0.2}),
        _g("b", ["b.s"], 0.5, {"b.s": 0.5}),
    ]
    cfg = RetrievalConfig(vote_k=2, n_groups=1, k=10)
    ranked = final_select(groups, cfg)
    assert [r.table for r in ranked] == ["a.y", "a.z", "b.r", "b.q"]
    assert [r.group_rank for r in ranked] == [1, 1, 2, 2]
    assert [r.table for r in final_select(groups, RetrievalConfig(vote_k=2, n_groups=1, k=3))] == ["a.y", "a.z", "b.r"]


def test_final_select_group_ties_prefer_larger_then_smaller_id():
    groups = [_g("a", ["a.m"], 1.0, {"a.m": 1}), _g("a", ["a.c", "a.d"], 1.0, {"a.c": 1, "a.d": 1}), _g("a", ["a.b"], 1.0, {"a.b": 1})]
    ranked = final_select(groups, RetrievalConfig(vote_k=5, n_groups=5))
    assert [r.table for r in ranked] == ["a.c", "a.d", "a.b", "a.m"]


def test_final_select_dedupes_overlapping_groups():
    groups = [_g("a", ["a.x", "a.y"], 2.0, {"a.x": 1, "a.y": 1}), _g("a", ["a.y", "a.z"], 1.0, {"a.y": 1, "a.z": 1})]
    assert [r.table for r in final_select(groups, RetrievalConfig())] == ["a.x", "a.y", "a.z"]


def test_config_validation_and_label():
    assert RetrievalConfig().label() == "n5-v5-noexp"
    assert RetrievalConfig(expand_groups=True, n_groups=2, vote_k=3).label() == "n2-v3-exp"
    for bad in ({"vote_k": 0}, {"n_groups": -1}, {"k": 0}, {"first_stage_breadth": 0}):
        with pytest.raises(UsageError):
            RetrievalConfig(**bad)


def test_form_groups_per_database():
    schema = schema_from_dict(
        {"database_id": "d", "tables": [{"name": n} for n in "abcd"], "foreign_keys": [{"from_table": "a", "to_table": "b"}]}
    )
    groups = form_groups({"d": {"d.a", "d.b", "d.c"}}, {"d": build_schema_graph(schema)})
    assert [sorted(g.tables) for g in groups] == [["d.a", "d.b"], ["d.c"]]


# --- end to end on the small sports corpus -----------------------------------


JERSEY = "What was the average sale of Luka Dončić jerseys in 2025?"


def test_jersey_query_puts_sale_and_jersey_in_top_group(sports):
    res = sports.dctr(RetrievalConfig(vote_k=3, n_groups=2, k=10)).retrieve(JERSEY)
    top = [r.table for r in res.ranked if r.group_rank == 1]
    assert {"sports.sale", "sports.jersey"} <= set(top)
    assert res.decomposition.source is DecompositionSource.FALLBACK
    assert [c.name for c in res.components] == ["sale", "Luka Dončić", "jerseys", "2025"]


def test_explain_has_breakdown(sports):
    res = sports.dctr().retrieve(JERSEY)
    ex = res.explain()
    assert ex["decomposition"]["components"][0]["component_type"] == "aggregator"
    assert len(ex["component_hits"]) == 4
    assert ex["groups"] and "coverage" in ex["groups"][0]


def test_first_pass_contains_direct_hits(sports):
    vecs = sports.embedder.embed_texts(["sale", "referee"])
    cands = first_pass(vecs, sports.indices, breadth=1)
    assert {"sports.sale", "sports.referee"} <= cands["sports"]
    with pytest.raises(UsageError):
        first_pass(np.empty((0, 256)), sports.indices, 1)


def test_dense_baseline_ranks_by_score(sports):
    ranked = dense_baseline("referee", sports.indices.tables, sports.embedder, 3)
    assert ranked[0].table == "sports.referee"
    assert [r.table_score for r in ranked] == sorted((r.table_score for r in ranked), reverse=True)
    assert len(ranked) == 3


def test_expansion_adds_neighbours(sports):
    plain = sports.dctr(RetrievalConfig(first_stage_breadth=1, vote_k=10, n_groups=10)).retrieve("referee sale")
    expanded = sports.dctr(RetrievalConfig(first_stage_breadth=1, vote_k=10, n_groups=10, expand_groups=True)).retrieve("referee sale")
    assert set(plain.tables) < set(expanded.tables)
    prov = {t: s for g in expanded.groups for t, s in g.provenance.items()}
    assert prov.get("sports.jersey") == "sports.sale"


def test_only_aggregators_falls_back_to_dense(sports):
    d = DecomposedQuery("highest", [QueryComponent("highest", ComponentType.AGGREGATOR)], DecompositionSource.FALLBACK)
    res = sports.dctr().retrieve("highest", decomposition=d)
    assert res.used_dense_fallback
    assert res.ranked == dense_baseline("highest", sports.indices.tables, sports.embedder, 25)


def test_make_retriever(sports):
    assert make_retriever("dense", sports.corpus, sports.indices, sports.embedder, sports.decomposer, RetrievalConfig()).method == "dense"
    with pytest.raises(UsageError):
        make_retriever("bm25", sports.corpus, sports.indices, sports.embedder, sports.decomposer, RetrievalConfig())
