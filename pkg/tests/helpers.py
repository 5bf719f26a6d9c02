"""Shared builders for test corpora."""

from __future__ import annotations

from dataclasses import dataclass

from dctr.decomposition import Decomposer
from dctr.embedding import DeterministicEmbedder, Embedder
from dctr.evaluation import QueryCase, case_from_dict
from dctr.index import IndexBundle, build_indices
from dctr.retrieval import DCTRRetriever, DenseRetriever, RetrievalConfig
from dctr.schema import Corpus, schema_from_dict
from dctr.synthetic import toyverse


@dataclass
class Setup:
    corpus: Corpus
    cases: list[QueryCase]
    cases_raw: list[dict]
    embedder: Embedder
    indices: IndexBundle
    decomposer: Decomposer

    def dctr(self, config: RetrievalConfig | None = None) -> DCTRRetriever:
        return DCTRRetriever(self.corpus, self.indices, self.embedder, self.decomposer, config or RetrievalConfig())

    def dense(self, config: RetrievalConfig | None = None) -> DenseRetriever:
        return DenseRetriever(self.indices, self.embedder, config or RetrievalConfig())


def build_setup(docs: list[dict], cases_raw: list[dict], dim: int = 64, seed: int = 0) -> Setup:
    corpus = Corpus.from_schemas(schema_from_dict(d) for d in docs)
    embedder = Embedder(DeterministicEmbedder(dim=dim, seed=seed))
    return Setup(
        corpus=corpus,
        cases=[case_from_dict(c) for c in cases_raw],
        cases_raw=cases_raw,
        embedder=embedder,
        indices=build_indices(corpus.schemas.values(), embedder),
        decomposer=Decomposer(),
    )


def toyverse_setup(generator_seed: int = 0, dim: int = 64, embed_seed: int = 0) -> Setup:
    docs, cases = toyverse(generator_seed)
    return build_setup(docs, cases, dim, embed_seed)


SPORTS_DOC = {
    "database_id": "sports",
    "tables": [
        {"name": "player", "columns": [{"name": "player_id"}, {"name": "full_name"}, {"name": "team_id"}]},
        {"name": "team", "columns": [{"name": "team_id"}, {"name": "team_name"}]},
        {"name": "jersey", "columns": [{"name": "jersey_id"}, {"name": "player_id"}, {"name": "size"}]},
        {"name": "sale", "columns": [{"name": "sale_id"}, {"name": "jersey_id"}, {"name": "amount"}, {"name": "sale_date"}]},
        {"name": "venue", "columns": [{"name": "venue_id"}, {"name": "city"}]},
        {"name": "referee", "columns": [{"name": "referee_id"}, {"name": "license"}]},
    ],
    "foreign_keys": [
        {"from_table": "player", "to_table": "team"},
        {"from_table": "jersey", "to_table": "player"},
        {"from_table": "sale", "to_table": "jersey"},
    ],
}
