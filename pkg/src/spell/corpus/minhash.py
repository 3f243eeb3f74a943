"""Seeded MinHash signatures, LSH banding, and near-duplicate removal.

Signatures use the classic (a*x + b) mod p scheme over a 61-bit Mersenne
prime. Shingle tokens and permutation constants are both 32-bit, so every
product fits a uint64 exactly — no silent wraparound, and signatures are
bit-stable across platforms and runs for a fixed seed.
"""

from __future__ import annotations

import hashlib
import logging
import re
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from ..errors import DomainError, EmptyDocument
from ..types import RawDocument

logger = logging.getLogger(__name__)

_MERSENNE_PRIME = np.uint64((1 << 61) - 1)
_MAX_HASH = np.uint64((1 << 32) - 1)
_HASH_RANGE = 1 << 32

_WS_RE = re.compile(r"\s+")


def _shingle_tokens(text: str, shingle_size: int) -> set[bytes]:
    """Character shingles over lowercased, whitespace-collapsed text."""
    collapsed = _WS_RE.sub(" ", text.lower()).strip()
    if not collapsed:
        raise EmptyDocument("cannot shingle a document with no visible text")
    if len(collapsed) <= shingle_size:
        return {collapsed.encode("utf-8")}
    encoded = [collapsed[i : i + shingle_size] for i in range(len(collapsed) - shingle_size + 1)]
    return {s.encode("utf-8") for s in encoded}


def _token_hash(token: bytes) -> int:
    """Stable 32-bit hash of a shingle (never Python's salted hash)."""
    digest = hashlib.blake2b(token, digest_size=8).digest()
    return int.from_bytes(digest, "little") % _HASH_RANGE


class MinHasher:
    """Computes fixed-seed MinHash signatures and banded LSH keys."""

    def __init__(self, num_perm: int = 128, shingle_size: int = 5, seed: int = 0) -> None:
        if num_perm < 2:
            raise DomainError(f"num_perm must be >= 2, got {num_perm}")
        if shingle_size < 1:
            raise DomainError(f"shingle_size must be >= 1, got {shingle_size}")
        self.num_perm = num_perm
        self.shingle_size = shingle_size
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._a = rng.integers(1, _HASH_RANGE, size=num_perm, dtype=np.uint64)
        self._b = rng.integers(0, _HASH_RANGE, size=num_perm, dtype=np.uint64)

    def signature(self, text: str) -> np.ndarray:
        values = np.fromiter(
            (_token_hash(t) for t in _shingle_tokens(text, self.shingle_size)),
            dtype=np.uint64,
        )
        # (num_perm, n_shingles); every product < 2**64 by construction
        hashed = (self._a[:, None] * values[None, :] + self._b[:, None]) % _MERSENNE_PRIME
        return (hashed & _MAX_HASH).min(axis=1)


def minhash_signature(
    text: str, num_perm: int = 128, shingle_size: int = 5, seed: int = 0
) -> np.ndarray:
    return MinHasher(num_perm, shingle_size, seed).signature(text)


def estimated_jaccard(sig_a: np.ndarray, sig_b: np.ndarray) -> float:
    """Fraction of matching signature positions (unbiased Jaccard estimate)."""
    if sig_a.shape != sig_b.shape:
        raise DomainError(f"signature shapes differ: {sig_a.shape} vs {sig_b.shape}")
    return float(np.mean(sig_a == sig_b))


def exact_jaccard(text_a: str, text_b: str, shingle_size: int = 5) -> float:
    """Exact shingle-set Jaccard; the oracle the signatures estimate."""
    a = _shingle_tokens(text_a, shingle_size)
    b = _shingle_tokens(text_b, shingle_size)
    return len(a & b) / len(a | b)


def _integrate(f, lo: float, hi: float, steps: int = 200) -> float:
    if hi <= lo:
        return 0.0
    xs = np.linspace(lo, hi, steps)
    ys = f(xs)
    return float(np.sum((ys[1:] + ys[:-1]) * np.diff(xs)) / 2.0)


@lru_cache(maxsize=None)
def optimal_bands(threshold: float, num_perm: int) -> tuple[int, int]:
    """(bands, rows) minimizing false-positive + false-negative area at threshold."""
    if not (0.0 < threshold < 1.0):
        raise DomainError(f"threshold must be in (0,1), got {threshold}")
    best: tuple[float, int, int] | None = None
    for b in range(1, num_perm + 1):
        for r in range(1, num_perm // b + 1):

            def collide(s: np.ndarray) -> np.ndarray:
                return 1.0 - (1.0 - s**r) ** b

            fp = _integrate(collide, 0.0, threshold)
            fn = _integrate(lambda s: 1.0 - collide(s), threshold, 1.0)
            err = fp + fn
            if best is None or err < best[0]:
                best = (err, b, r)
    assert best is not None
    return best[1], best[2]


class _LshIndex:
    """Banded buckets over signatures for candidate generation."""

    def __init__(self, bands: int, rows: int) -> None:
        self.bands = bands
        self.rows = rows
        self.buckets: dict[tuple[int, bytes], list[int]] = {}

    def keys(self, signature: np.ndarray) -> list[tuple[int, bytes]]:
        out = []
        for band in range(self.bands):
            chunk = signature[band * self.rows : (band + 1) * self.rows]
            out.append((band, chunk.tobytes()))
        return out

    def add(self, idx: int, signature: np.ndarray) -> None:
        for key in self.keys(signature):
            self.buckets.setdefault(key, []).append(idx)

    def query(self, signature: np.ndarray) -> set[int]:
        found: set[int] = set()
        for key in self.keys(signature):
            found.update(self.buckets.get(key, ()))
        return found


class _UnionFind:
    def __init__(self, n: int) -> None:
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        # keep the earlier index as the root so "earliest wins" is structural
        if ra < rb:
            self.parent[rb] = ra
        else:
            self.parent[ra] = rb


def dedup_and_decontaminate(
    docs: Sequence[RawDocument],
    contaminants: Iterable[RawDocument] = (),
    threshold: float = 0.8,
    *,
    num_perm: int = 128,
    shingle_size: int = 5,
    seed: int = 0,
) -> list[RawDocument]:
    """Remove near-duplicates and contaminant lookalikes.

    Candidate pairs come from LSH banding; each candidate is confirmed by
    signature similarity >= threshold. Near-duplicate groups keep their
    earliest member (input order). Any document confirmed against a
    contaminant is dropped outright.
    """
    docs = list(docs)
    if not docs:
        return []
    hasher = MinHasher(num_perm=num_perm, shingle_size=shingle_size, seed=seed)
    bands, rows = optimal_bands(threshold, num_perm)

    signatures = [hasher.signature(d.text) for d in docs]

    cont_list = list(contaminants)
    contaminated: set[int] = set()
    if cont_list:
        cont_index = _LshIndex(bands, rows)
        cont_sigs = [hasher.signature(c.text) for c in cont_list]
        for i, sig in enumerate(cont_sigs):
            cont_index.add(i, sig)
        for i, sig in enumerate(signatures):
            for j in cont_index.query(sig):
                if estimated_jaccard(sig, cont_sigs[j]) >= threshold:
                    contaminated.add(i)
                    break
    survivors = [i for i in range(len(docs)) if i not in contaminated]

    index = _LshIndex(bands, rows)
    uf = _UnionFind(len(docs))
    for i in survivors:
        for j in index.query(signatures[i]):
            if estimated_jaccard(signatures[i], signatures[j]) >= threshold:
                uf.union(i, j)
        index.add(i, signatures[i])

    kept = [i for i in survivors if uf.find(i) == i]
    removed = len(docs) - len(kept)
    if removed:
        logger.info(
            "dedup: kept %d of %d documents (%d contaminated, %d near-duplicates)",
            len(kept),
            len(docs),
            len(contaminated),
            removed - len(contaminated),
        )
    return [docs[i] for i in kept]
