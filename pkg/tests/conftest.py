"""Shared fixtures: synthetic corpora and simulated agent profiles.

Everything here is deterministic per seed so tests can assert exact
artifacts (file bytes, digests, sampled ids) without golden files.
"""

import pathlib
import random

import pytest

from spell.backends import SimAgentProfile, SimulatedBackend
from spell.corpus.store import CorpusStore
from spell.types import DocumentCluster, RawDocument


def synthetic_store(num_clusters: int = 6, docs_per_cluster: int = 8, seed: int = 0) -> CorpusStore:
    """Build an in-memory corpus of short synthetic ledger documents."""
    rng = random.Random(seed)
    documents = {}
    clusters = []
    for c in range(num_clusters):
        doc_ids = []
        for d in range(docs_per_cluster):
            doc_id = f"d{c:03d}{d:02d}"
            lines = " ".join(
                f"entry {rng.getrandbits(16):04x} holds value {rng.randint(100, 999)}."
                for _ in range(10)
            )
            documents[doc_id] = RawDocument(doc_id=doc_id, text=f"Ledger block {c}-{d}. {lines}")
            doc_ids.append(doc_id)
        clusters.append(
            DocumentCluster(cluster_id=f"c{c:05d}", doc_ids=tuple(doc_ids), domain_label="synthetic")
        )
    return CorpusStore(root=pathlib.Path("unused"), documents=documents, clusters=clusters, manifest={})


@pytest.fixture
def store() -> CorpusStore:
    return synthetic_store()


@pytest.fixture
def sim_backend() -> SimulatedBackend:
    """A well-behaved simulated agent: no format breaks, reliable verifier."""
    return SimulatedBackend(SimAgentProfile(seed=11, verifier_accuracy=1.0))


@pytest.fixture
def flaky_profile() -> SimAgentProfile:
    """Profile exercising every failure path the loop must tolerate."""
    return SimAgentProfile(
        seed=5,
        responder_skill=0.50,
        skill_growth_per_step=0.012,
        verifier_accuracy=0.92,
        questioner_difficulty_base=0.15,
        difficulty_per_exemplar=0.12,
        format_break_rate=0.03,
        parametric_rate=0.04,
        paraphrase_rate=0.05,
        unparseable_verdict_rate=0.02,
    )
