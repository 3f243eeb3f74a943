"""Quality/length gate applied before any expensive corpus work."""

from __future__ import annotations

from typing import Iterable, Iterator

from ..types import RawDocument


def filter_documents(
    docs: Iterable[RawDocument],
    *,
    min_chars: int = 100,
    max_chars: int = 32768,
    min_quality: float = 1.0,
) -> Iterator[RawDocument]:
    """Yield documents whose quality and character length pass the gate.

    Input order is preserved; the function is a pure stream filter (and
    therefore idempotent).
    """
    for doc in docs:
        if doc.quality < min_quality:
            continue
        if not (min_chars <= doc.char_len <= max_chars):
            continue
        yield doc
