from __future__ import annotations

import json

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dctr.decomposition import (
    PROMPT_TEMPLATE,
    ComponentType,
    DecomposedQuery,
    DecompositionCache,
    DecompositionSource,
    Decomposer,
    HttpModelClient,
    QueryComponent,
    check_exact_phrases,
    fallback_decompose,
    few_shot_examples,
    parse_decomposition_response,
    prompt_hash,
    render_prompt,
    retrieval_components,
)
from dctr.errors import ParseError, ProviderContractError, TransientError, UsageError

S, V, A = ComponentType.SCHEMA, ComponentType.VALUE, ComponentType.AGGREGATOR
JERSEY = "What was the average sale of Luka Dončić jerseys in 2025?"


class RecordedClient:
    """Replays canned answers keyed by query text; counts calls."""

    model_id = "stub-model"

    def __init__(self, answers: dict[str, str] | None = None, fail: Exception | None = None):
        self.answers = answers or {}
        self.fail = fail
        self.calls: list[dict] = []

    def complete(self, prompt: str, decoding: dict) -> str:
        self.calls.append(decoding)
        if self.fail is not None:
            raise self.fail
        query = prompt.rsplit("Input Query:\n", 1)[1].split("\n\nOutput:", 1)[0]
        return self.answers[query]


def _answer(*triples) -> str:
    return json.dumps([{"component_name": n, "component_description": "", "component_type": t} for n, t in triples])


# --- prompt ---------------------------------------------------------------


def test_prompt_sections_and_placement():
    p = render_prompt("list all venues")
    for header in ("---Goal---", "---Output---", "---Schema Element Component Description---", "---Examples---", "---Real Data---"):
        assert header in p
    assert "Exclude phrases that are more likely to refer to specific cell values" in p
    assert p.rstrip().endswith("Input Query:\nlist all venues\n\nOutput:")
    assert few_shot_examples() in p


def test_prompt_keeps_literal_braces_in_query():
    q = "rows where config = '{query}' and {x}"
    p = render_prompt(q)
    assert q in p
    assert p.count("{query}") == 1


def test_few_shot_examples_have_all_types():
    text = few_shot_examples()
    for t in ("schema", "value", "aggregator"):
        assert f'"component_type": "{t}"' in text
    assert "Luka Don" in text


def test_prompt_hash_stable():
    assert prompt_hash(render_prompt("a b")) == prompt_hash(render_prompt("a b"))
    assert prompt_hash(render_prompt("a b")) != prompt_hash(render_prompt("a c"))
    assert "{few_shot_examples}" in PROMPT_TEMPLATE


# --- parsing --------------------------------------------------------------


def test_parse_json_list_and_fenced_block():
    raw = "Here you go:\n```json\n" + _answer(("sale", "schema"), ("2025", "value"), ("average", "aggregator")) + "\n```"
    comps = parse_decomposition_response(raw)
    assert [(c.name, c.ctype) for c in comps] == [("sale", S), ("2025", V), ("average", A)]


def test_parse_object_wrapper_and_unknown_type():
    raw = json.dumps({"components": [{"component_name": "jersey", "component_type": "mystery"}, {"component_description": "no name"}]})
    comps = parse_decomposition_response(raw)
    assert [(c.name, c.ctype) for c in comps] == [("jersey", S)]


def test_parse_line_blocks():
    raw = """
    - component_name: sale
      component_description: the sales table
      component_type: schema
    - component_name: 2025
      component_type: value
    """
    comps = parse_decomposition_response(raw)
    assert [(c.name, c.ctype) for c in comps] == [("sale", S), ("2025", V)]
    assert comps[0].description == "the sales table"


@pytest.mark.parametrize("raw", ["", "   ", "I cannot help with that."])
def test_parse_failures(raw):
    with pytest.raises(ParseError):
        parse_decomposition_response(raw)


def test_exact_phrase_check_is_lenient():
    comps = [QueryComponent("sale", S), QueryComponent("sales figures", S)]
    assert check_exact_phrases("average sale in 2025", comps) == ["sales figures"]


# --- fallback ----------------------------------------------------------------


def test_fallback_jersey_example():
    comps = fallback_decompose(JERSEY)
    assert [(c.name, c.ctype) for c in comps] == [
        ("average", A),
        ("sale", S),
        ("Luka Dončić", V),
        ("jerseys", S),
        ("2025", V),
    ]


@pytest.mark.parametrize(
    "query, expected",
    [
        ("tables", [("tables", S)]),
        ("the of and", []),
        ("price above 3.5", [("price", S), ("3.5", V)]),
        ("orders over 1,200", [("orders", S), ("1,200", V)]),
        ('products named "Blue Widget"', [("products", S), ("named", S), ("Blue Widget", V)]),
        ("Show the total count of employees", [("total", A), ("count", A), ("employees", S)]),
    ],
)
def test_fallback_rules(query, expected):
    assert [(c.name, c.ctype) for c in fallback_decompose(query)] == expected


@settings(max_examples=200, deadline=None)
@given(st.text(min_size=1, max_size=80).filter(str.strip))
def test_fallback_total_and_exact(query):
    comps = fallback_decompose(query)
    assert check_exact_phrases(query, comps) == []
    keys = [(c.name.lower(), c.ctype) for c in comps]
    assert len(keys) == len(set(keys))


def test_retrieval_components_drop_aggregators():
    d = DecomposedQuery(JERSEY, fallback_decompose(JERSEY), DecompositionSource.FALLBACK)
    assert [c.name for c in retrieval_components(d)] == ["sale", "Luka Dončić", "jerseys", "2025"]


# --- decomposer -------------------------------------------------------------


def test_model_result_is_cached(tmp_path):
    client = RecordedClient({JERSEY: _answer(("sale", "schema"), ("jerseys", "schema"), ("average", "aggregator"))})
    cache = DecompositionCache(tmp_path / "d.jsonl")
    dec = Decomposer(client=client, cache=cache)
    first = dec.decompose(JERSEY)
    assert first.source is DecompositionSource.MODEL
    assert client.calls == [{"temperature": 0.0, "max_tokens": 1024}]
    second = dec.decompose(JERSEY, run=2)
    assert second.source is DecompositionSource.CACHE
    assert second.components == first.components
    assert len(client.calls) == 1

    # persisted cache survives a restart
    fresh = Decomposer(client=RecordedClient(fail=AssertionError("should not call")), cache=DecompositionCache(tmp_path / "d.jsonl"))
    assert fresh.decompose(JERSEY).components == first.components


def test_sampling_runs_get_separate_entries(tmp_path):
    client = RecordedClient({"list venues": _answer(("venues", "schema"))})
    dec = Decomposer(client=client, cache=DecompositionCache(), temperature=0.7)
    dec.decompose("list venues", run=0)
    dec.decompose("list venues", run=1)
    dec.decompose("list venues", run=1)
    assert [c.get("seed") for c in client.calls] == [0, 1]


@pytest.mark.parametrize("error", [TransientError("down"), ProviderContractError("bad")])
def test_failing_client_falls_back(error):
    dec = Decomposer(client=RecordedClient(fail=error), cache=DecompositionCache())
    out = dec.decompose(JERSEY)
    assert out.source is DecompositionSource.FALLBACK
    assert out.components == fallback_decompose(JERSEY)
    assert dec.stats["fallback"] == 1


def test_unparseable_answer_is_retried_then_falls_back():
    client = RecordedClient({"x y": "no idea"})
    dec = Decomposer(client=client, parse_retries=2)
    assert dec.decompose("x y").source is DecompositionSource.FALLBACK
    assert len(client.calls) == 3


def test_blank_query_rejected():
    with pytest.raises(UsageError):
        Decomposer().decompose("  ")


def test_http_model_client_protocol():
    seen = []

    def handler(req):
        body = json.loads(req.content)
        seen.append(body)
        return httpx.Response(200, json={"text": _answer(("venue", "schema"))})

    client = HttpModelClient("http://llm.test", "m1", transport=httpx.MockTransport(handler), backoff=0.0)
    out = Decomposer(client=client).decompose("list venue")
    assert out.source is DecompositionSource.MODEL
    assert seen[0]["model_id"] == "m1"
    assert seen[0]["decoding"] == {"temperature": 0.0, "max_tokens": 1024}
    assert seen[0]["prompt"] == render_prompt("list venue")


def test_http_model_client_retries_and_gives_up():
    n = []

    def handler(req):
        n.append(1)
        return httpx.Response(429)

    client = HttpModelClient("http://llm.test", "m1", transport=httpx.MockTransport(handler), backoff=0.0, max_retries=2)
    with pytest.raises(TransientError):
        client.complete("p", {})
    assert len(n) == 3
