"""Exhaustive maximum-inner-product ranking of a page's linked documents."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .embedder import EmbeddingVector


class RankingError(Exception):
    pass


@dataclass(frozen=True)
class RankedList:
    query_url: str
    entries: tuple[tuple[str, float], ...]
    produced_with_layout: bool = True
    skipped: tuple[str, ...] = field(default=())

    @property
    def urls(self) -> list[str]:
        return [u for u, _ in self.entries]

    def to_json(self) -> dict:
        return {
            "query_url": self.query_url,
            "produced_with_layout": self.produced_with_layout,
            "entries": [{"url": u, "score": s} for u, s in self.entries],
            "skipped": list(self.skipped),
        }


Vector = Union[EmbeddingVector, np.ndarray, Sequence[float]]


def _values(v: Vector) -> np.ndarray:
    return v.values if isinstance(v, EmbeddingVector) else np.asarray(v, dtype=np.float64)


def score(query: Vector, doc: Vector) -> float:
    if isinstance(query, EmbeddingVector) and query.role != "query":
        raise ValueError("first argument must be a query-side vector")
    if isinstance(doc, EmbeddingVector) and doc.role != "document":
        raise ValueError("second argument must be a document-side vector")
    q, d = _values(query), _values(doc)
    if q.shape != d.shape:
        raise ValueError(f"dimension mismatch: {q.shape} vs {d.shape}")
    return float(np.dot(q, d))


def rank(query_vec: Vector, docs: Sequence[tuple[str, Vector]], query_url: str = "",
         produced_with_layout: bool = True, skipped: Sequence[str] = ()) -> RankedList:
    """Score every document and order by score descending, then URL ascending."""
    if not docs:
        raise RankingError("no candidate documents to rank")
    urls = [u for u, _ in docs]
    if len(set(urls)) != len(urls):
        raise RankingError("duplicate document URLs")
    scored = [(url, score(query_vec, vec)) for url, vec in docs]
    scored.sort(key=lambda e: (-e[1], e[0]))
    return RankedList(query_url, tuple(scored), produced_with_layout, tuple(skipped))


def top_k(ranked: RankedList, k: int) -> RankedList:
    if k < 1:
        raise ValueError("k must be >= 1")
    return RankedList(ranked.query_url, ranked.entries[:k], ranked.produced_with_layout,
                      ranked.skipped)
