"""Decomposition-based, connectivity-aware table retrieval."""

from __future__ import annotations

from .decomposition import ComponentType, DecomposedQuery, Decomposer, QueryComponent, fallback_decompose
from .embedding import DeterministicEmbedder, Embedder, EmbedderDescriptor
from .evaluation import QueryCase, capped_recall, complexity_report, dataset_stats, run_eval
from .index import IndexBundle, build_indices, load_index, persist_index
from .retrieval import DCTRRetriever, DenseRetriever, RetrievalConfig, make_retriever
from .schema import Corpus, DatabaseSchema, schema_from_dict

__all__ = [
    "ComponentType",
    "Corpus",
    "DCTRRetriever",
    "DatabaseSchema",
    "DecomposedQuery",
    "Decomposer",
    "DenseRetriever",
    "DeterministicEmbedder",
    "Embedder",
    "EmbedderDescriptor",
    "IndexBundle",
    "QueryCase",
    "QueryComponent",
    "RetrievalConfig",
    "build_indices",
    "capped_recall",
    "complexity_report",
    "dataset_stats",
    "fallback_decompose",
    "load_index",
    "make_retriever",
    "persist_index",
    "run_eval",
    "schema_from_dict",
]
