"""On-disk corpus store: documents, clusters, and a build manifest.

Layout (all UTF-8, LF line endings, stable key order):
  documents.jsonl  {"doc_id","quality","text"} per line
  clusters.jsonl   {"cluster_id","doc_ids"[,"domain_label"]} per line
  manifest.json    parameters and seeds of the build
Rebuilding from the same inputs and parameters reproduces the files byte
for byte.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from ..errors import IntegrityError
from ..types import DocumentCluster, RawDocument
from .clustering import cluster_documents
from .filtering import filter_documents
from .minhash import dedup_and_decontaminate

STORE_VERSION = 1
_EMBED_BATCH = 64


def _dump_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":")) + "\n"


def _atomic_write(path: Path, content: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(content)
    os.replace(tmp, path)


@dataclass
class CorpusStore:
    root: Path
    documents: dict[str, RawDocument]
    clusters: list[DocumentCluster]
    manifest: dict

    def document_text(self, doc_id: str) -> str:
        return self.documents[doc_id].text

    def cluster_docs(self, cluster: DocumentCluster) -> list[tuple[str, str]]:
        return [(doc_id, self.documents[doc_id].text) for doc_id in cluster.doc_ids]

    @classmethod
    def load(cls, root: str | Path) -> "CorpusStore":
        root = Path(root)
        docs_path = root / "documents.jsonl"
        clusters_path = root / "clusters.jsonl"
        manifest_path = root / "manifest.json"
        for path in (docs_path, clusters_path, manifest_path):
            if not path.exists():
                raise IntegrityError(f"corpus store is missing {path.name} under {root}")

        documents: dict[str, RawDocument] = {}
        with open(docs_path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise IntegrityError(f"{docs_path.name}:{line_no}: bad JSON ({exc})") from exc
                doc = RawDocument(
                    doc_id=obj["doc_id"], text=obj["text"], quality=obj.get("quality", 1.0)
                )
                if doc.doc_id in documents:
                    raise IntegrityError(f"{docs_path.name}: duplicate doc_id {doc.doc_id!r}")
                documents[doc.doc_id] = doc

        clusters: list[DocumentCluster] = []
        seen_cluster_ids: set[str] = set()
        assigned: set[str] = set()
        with open(clusters_path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise IntegrityError(
                        f"{clusters_path.name}:{line_no}: bad JSON ({exc})"
                    ) from exc
                cluster = DocumentCluster(
                    cluster_id=obj["cluster_id"],
                    doc_ids=tuple(obj["doc_ids"]),
                    domain_label=obj.get("domain_label"),
                )
                if cluster.cluster_id in seen_cluster_ids:
                    raise IntegrityError(
                        f"{clusters_path.name}: duplicate cluster_id {cluster.cluster_id!r}"
                    )
                if not cluster.doc_ids:
                    raise IntegrityError(
                        f"{clusters_path.name}: cluster {cluster.cluster_id!r} is empty"
                    )
                for doc_id in cluster.doc_ids:
                    if doc_id not in documents:
                        raise IntegrityError(
                            f"cluster {cluster.cluster_id!r} references unknown doc {doc_id!r}"
                        )
                    if doc_id in assigned:
                        raise IntegrityError(f"doc {doc_id!r} appears in more than one cluster")
                    assigned.add(doc_id)
                seen_cluster_ids.add(cluster.cluster_id)
                clusters.append(cluster)

        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        return cls(root=root, documents=documents, clusters=clusters, manifest=manifest)

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        doc_lines = [
            _dump_line({"doc_id": d.doc_id, "quality": d.quality, "text": d.text})
            for d in self.documents.values()
        ]
        cluster_lines = []
        for cluster in self.clusters:
            obj: dict = {"cluster_id": cluster.cluster_id, "doc_ids": list(cluster.doc_ids)}
            if cluster.domain_label is not None:
                obj["domain_label"] = cluster.domain_label
            cluster_lines.append(_dump_line(obj))
        _atomic_write(self.root / "documents.jsonl", "".join(doc_lines))
        _atomic_write(self.root / "clusters.jsonl", "".join(cluster_lines))
        _atomic_write(
            self.root / "manifest.json",
            json.dumps(self.manifest, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        )


def build_corpus_store(
    docs: Iterable[RawDocument],
    store_dir: str | Path,
    *,
    embed_fn: Callable[[list[str]], Sequence[Sequence[float]]],
    contaminants: Iterable[RawDocument] = (),
    min_chars: int = 100,
    max_chars: int = 32768,
    min_quality: float = 1.0,
    dedup_threshold: float = 0.8,
    num_perm: int = 128,
    shingle_size: int = 5,
    target_clusters: int | None = None,
    mean_cluster_size: int = 20,
    branching: int = 2,
    seed: int = 0,
    domain_label: str | None = None,
    embedding_source: str = "backend",
) -> CorpusStore:
    """Filter, deduplicate, embed, cluster, and persist a corpus."""
    raw = list(docs)
    filtered = list(
        filter_documents(raw, min_chars=min_chars, max_chars=max_chars, min_quality=min_quality)
    )
    deduped = dedup_and_decontaminate(
        filtered,
        contaminants=list(contaminants),
        threshold=dedup_threshold,
        num_perm=num_perm,
        shingle_size=shingle_size,
        seed=seed,
    )

    embeddings: dict[str, Sequence[float]] = {}
    dims: int | None = None
    for start in range(0, len(deduped), _EMBED_BATCH):
        batch = deduped[start : start + _EMBED_BATCH]
        vectors = embed_fn([d.text for d in batch])
        if len(vectors) != len(batch):
            raise IntegrityError(
                f"embedding batch returned {len(vectors)} vectors for {len(batch)} texts"
            )
        for doc, vec in zip(batch, vectors):
            values = tuple(getattr(vec, "values", vec))
            if dims is None:
                dims = len(values)
            elif len(values) != dims:
                raise IntegrityError("embedding width changed mid-corpus")
            embeddings[doc.doc_id] = values

    if target_clusters is None:
        target_clusters = max(1, math.ceil(len(deduped) / mean_cluster_size)) if deduped else 0

    partition = (
        cluster_documents(embeddings, target_clusters, branching=branching, seed=seed)
        if deduped
        else []
    )
    clusters = [
        DocumentCluster(
            cluster_id=f"c{idx:05d}", doc_ids=tuple(group), domain_label=domain_label
        )
        for idx, group in enumerate(partition)
    ]

    manifest = {
        "version": STORE_VERSION,
        "seed": seed,
        "filter": {"min_chars": min_chars, "max_chars": max_chars, "min_quality": min_quality},
        "dedup": {
            "threshold": dedup_threshold,
            "num_perm": num_perm,
            "shingle_size": shingle_size,
        },
        "clustering": {
            "target_clusters": target_clusters,
            "branching": branching,
            "embedding_dims": dims,
            "embedding_source": embedding_source,
        },
        "counts": {
            "input": len(raw),
            "filtered": len(filtered),
            "deduped": len(deduped),
            "clusters": len(clusters),
        },
    }
    store = CorpusStore(
        root=Path(store_dir),
        documents={d.doc_id: d for d in deduped},
        clusters=clusters,
        manifest=manifest,
    )
    store.save()
    return store
