"""Ranking metrics with binary relevance.

Per query: reciprocal rank, average precision, nDCG and precision / recall /
F1 at cut-offs 1..10.  Reports aggregate per publisher and then take the
unweighted mean over publishers (``macro``), or pool all queries (``micro``).
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

K_RANGE = tuple(range(1, 11))
RANK_METRICS = ("mrr", "map", "ndcg")


class UndefinedMetric(ValueError):
    """The query has no relevant documents."""


@dataclass(frozen=True)
class QueryResult:
    publication_id: str
    ranked_urls: tuple[str, ...]
    relevant_urls: frozenset[str]
    publisher: str = ""

    def __post_init__(self):
        object.__setattr__(self, "ranked_urls", tuple(self.ranked_urls))
        object.__setattr__(self, "relevant_urls", frozenset(self.relevant_urls))
        if len(set(self.ranked_urls)) != len(self.ranked_urls):
            raise ValueError("ranked_urls contains duplicates")


def _hits(result: QueryResult) -> list[bool]:
    return [u in result.relevant_urls for u in result.ranked_urls]


def reciprocal_rank(result: QueryResult) -> float:
    for i, hit in enumerate(_hits(result), start=1):
        if hit:
            return 1.0 / i
    return 0.0


def _require_relevant(result: QueryResult) -> int:
    n = len(result.relevant_urls)
    if n == 0:
        raise UndefinedMetric(f"query {result.publication_id!r} has no relevant documents")
    return n


def average_precision(result: QueryResult) -> float:
    n_rel = _require_relevant(result)
    found, total = 0, 0.0
    for i, hit in enumerate(_hits(result), start=1):
        if hit:
            found += 1
            total += found / i
    return total / n_rel


def ndcg(result: QueryResult) -> float:
    n_rel = _require_relevant(result)
    dcg = sum(1.0 / math.log2(i + 1) for i, hit in enumerate(_hits(result), start=1) if hit)
    idcg = sum(1.0 / math.log2(i + 1) for i in range(1, n_rel + 1))
    return dcg / idcg


def prf_at_k(result: QueryResult, k: int) -> tuple[float, float, float]:
    if k < 1:
        raise ValueError("k must be >= 1")
    n_rel = _require_relevant(result)
    hits = sum(_hits(result)[:k])
    precision = hits / k
    recall = hits / n_rel
    f1 = 0.0 if hits == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def query_metrics(result: QueryResult, ks: Sequence[int] = K_RANGE) -> dict[str, float]:
    """All metrics for one query.  Without relevant documents only ``rr``."""
    values = {"rr": reciprocal_rank(result)}
    if not result.relevant_urls:
        return values
    values["ap"] = average_precision(result)
    values["ndcg"] = ndcg(result)
    for k in ks:
        p, r, f = prf_at_k(result, k)
        values[f"p@{k}"], values[f"r@{k}"], values[f"f1@{k}"] = p, r, f
    return values


# -- aggregation ----------------------------------------------------------------------

# per-query key -> report key
_RENAME = {"rr": "mrr", "ap": "map"}


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs) if xs else float("nan")


def _mean_by_key(rows: Iterable[Mapping[str, float]]) -> dict[str, float]:
    cols: dict[str, list[float]] = defaultdict(list)
    for row in rows:
        for key, value in row.items():
            cols[_RENAME.get(key, key)].append(value)
    return {k: _mean(v) for k, v in sorted(cols.items())}


@dataclass
class MetricsReport:
    per_query: dict[str, dict[str, float]]
    per_publisher: dict[str, dict[str, float]]
    overall: dict[str, float]
    k_table: dict[int, dict[str, float]]
    excluded: list[str] = field(default_factory=list)
    aggregation: str = "macro"
    publisher_of: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "aggregation": self.aggregation,
            "overall": self.overall,
            "per_publisher": self.per_publisher,
            "k_table": {str(k): v for k, v in self.k_table.items()},
            "per_query": self.per_query,
            "excluded_queries": self.excluded,
        }


def aggregate(per_query: Mapping[str, Mapping[str, float]], publisher_of: Mapping[str, str],
              aggregation: str = "macro", ks: Sequence[int] = K_RANGE) -> MetricsReport:
    """Per-publisher means, then macro (publisher-unweighted) or micro overall."""
    if aggregation not in ("macro", "micro"):
        raise ValueError("aggregation must be 'macro' or 'micro'")
    groups: dict[str, list[Mapping[str, float]]] = defaultdict(list)
    for qid, values in per_query.items():
        groups[publisher_of[qid]].append(values)
    per_publisher = {p: _mean_by_key(rows) for p, rows in sorted(groups.items())}
    if aggregation == "macro":
        overall = _mean_by_key(per_publisher.values())
    else:
        overall = _mean_by_key(per_query.values())
    k_table = {
        k: {
            "precision": overall.get(f"p@{k}", float("nan")),
            "recall": overall.get(f"r@{k}", float("nan")),
            "f1": overall.get(f"f1@{k}", float("nan")),
        }
        for k in ks
    }
    excluded = sorted(q for q, v in per_query.items() if "ap" not in v)
    return MetricsReport(
        per_query={q: dict(v) for q, v in sorted(per_query.items())},
        per_publisher=per_publisher,
        overall=overall,
        k_table=k_table,
        excluded=excluded,
        aggregation=aggregation,
        publisher_of=dict(publisher_of),
    )


def evaluate_results(results: Sequence[QueryResult], aggregation: str = "macro",
                     ks: Sequence[int] = K_RANGE) -> MetricsReport:
    per_query = {r.publication_id: query_metrics(r, ks) for r in results}
    publisher_of = {r.publication_id: r.publisher for r in results}
    return aggregate(per_query, publisher_of, aggregation, ks)


def macro_average(per_publisher: Mapping[str, float]) -> float:
    """Unweighted mean of per-publisher values (the "All"/"Average" column)."""
    return _mean(list(per_publisher.values()))


def run_cutoff_sweep(results: Sequence[QueryResult], k_range: Sequence[int] = K_RANGE,
                     aggregation: str = "macro") -> dict[int, dict[str, float]]:
    return evaluate_results(results, aggregation, k_range).k_table


def best_f1_cutoffs(k_table: Mapping[int, Mapping[str, float]], ndigits: int = 3) -> list[int]:
    """Cut-offs where F1 is maximal after rounding to ``ndigits``."""
    rounded = {k: round(v["f1"], ndigits) for k, v in k_table.items()}
    best = max(rounded.values())
    return sorted(k for k, v in rounded.items() if v == best)
