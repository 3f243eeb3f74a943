"""Corpus preparation: filtering, near-duplicate removal, clustering, storage."""

from .clustering import cluster_documents
from .filtering import filter_documents
from .minhash import (
    MinHasher,
    dedup_and_decontaminate,
    estimated_jaccard,
    exact_jaccard,
    minhash_signature,
    optimal_bands,
)
from .store import CorpusStore, build_corpus_store

__all__ = [
    "CorpusStore",
    "MinHasher",
    "build_corpus_store",
    "cluster_documents",
    "dedup_and_decontaminate",
    "estimated_jaccard",
    "exact_jaccard",
    "filter_documents",
    "minhash_signature",
    "optimal_bands",
]
