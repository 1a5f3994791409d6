"""Labeled relevance dataset: schema, JSONL I/O, stratified splits, stats.

On disk a dataset is a directory holding ``publications.jsonl`` and
``links.jsonl`` (UTF-8, one JSON object per line).  Crawled bundles for the
publications may live under ``bundles/<publication id>/``.
"""

from __future__ import annotations

import json
import logging
import math
import random
import statistics
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .urls import is_absolute_http, normalize_url

log = logging.getLogger(__name__)

PUBLICATIONS_FILE = "publications.jsonl"
LINKS_FILE = "links.jsonl"


class DatasetError(Exception):
    """Base class for dataset problems."""


class DatasetLoadError(DatasetError):
    def __init__(self, path, message="cannot read dataset file"):
        self.path = Path(path)
        super().__init__(f"{message}: {self.path}")


class RecordError(DatasetError):
    """A record failed validation; carries file, line number and field."""

    def __init__(self, path, line: int, field_name: str, message: str):
        self.path = Path(path)
        self.line = line
        self.field = field_name
        super().__init__(f"{self.path}:{line}: field {field_name!r}: {message}")


class ReferentialIntegrityError(DatasetError):
    pass


@dataclass(frozen=True)
class AuthorRecord:
    name: str
    affiliations: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name.strip():
            raise ValueError("author name must be non-empty")


@dataclass(frozen=True)
class PublicationRecord:
    id: str
    doi: str
    publisher: str
    title: str
    year: int
    landing_url: str
    authors: tuple[AuthorRecord, ...] = ()

    def __post_init__(self):
        if not self.doi or not self.doi.startswith("10."):
            raise ValueError(f"doi must start with '10.': {self.doi!r}")
        if not 1900 <= self.year <= 2100:
            raise ValueError(f"year out of range: {self.year}")
        if not is_absolute_http(self.landing_url):
            raise ValueError(f"landing_url not absolute http(s): {self.landing_url!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["authors"] = [
            {"name": a.name, "affiliations": list(a.affiliations)} for a in self.authors
        ]
        return d


@dataclass(frozen=True)
class LinkLabel:
    publication_id: str
    url: str
    relevant: bool
    anchor_text: str = ""

    def __post_init__(self):
        if not is_absolute_http(self.url):
            raise ValueError(f"url not absolute http(s): {self.url!r}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        a, b, c = set(self.train), set(self.validation), set(self.test)
        if a & b or a & c or b & c:
            raise ValueError("split parts overlap")

    def part(self, name: str) -> tuple[str, ...]:
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]

    def to_json(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class DatasetStats:
    n_publications: int
    n_links: int
    mean_links_per_page: float
    sd_links_per_page: float
    mean_relevant_per_page: float
    sd_relevant_per_page: float
    mean_authors: float
    sd_authors: float
    mean_affiliations_per_author: float = 0.0
    sd_affiliations_per_author: float = 0.0
    n_self_links: int = 0
    n_links_excluding_self: int = 0
    sd_convention: str = "population"

    def to_json(self) -> dict:
        return asdict(self)


# -- I/O ---------------------------------------------------------------------

_PUB_FIELDS = ("id", "doi", "publisher", "title", "year", "landing_url", "authors")
_LINK_FIELDS = ("publication_id", "url", "relevant")


def _read_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    if not path.is_file():
        raise DatasetLoadError(path, "missing dataset file")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetLoadError(path) from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordError(path, lineno, "<json>", str(exc)) from exc
        if not isinstance(obj, dict):
            raise RecordError(path, lineno, "<json>", "expected a JSON object")
        yield lineno, obj


def _parse_publication(path: Path, lineno: int, obj: dict) -> PublicationRecord:
    for name in _PUB_FIELDS:
        if name not in obj:
            raise RecordError(path, lineno, name, "missing")
    year = obj["year"]
    if not isinstance(year, int) or isinstance(year, bool):
        raise RecordError(path, lineno, "year", "must be an integer")
    authors = []
    if not isinstance(obj["authors"], list):
        raise RecordError(path, lineno, "authors", "must be a list")
    for a in obj["authors"]:
        try:
            authors.append(AuthorRecord(str(a["name"]), tuple(a.get("affiliations", ()))))
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordError(path, lineno, "authors", f"bad author entry: {exc}") from exc
    try:
        return PublicationRecord(
            id=str(obj["id"]),
            doi=str(obj["doi"]),
            publisher=str(obj["publisher"]),
            title=str(obj["title"]),
            year=year,
            landing_url=str(obj["landing_url"]),
            authors=tuple(authors),
        )
    except ValueError as exc:
        msg = str(exc)
        name = msg.split(" ", 1)[0] if msg.split(" ", 1)[0] in _PUB_FIELDS else "<record>"
        raise RecordError(path, lineno, name, msg) from exc


def _parse_link(path: Path, lineno: int, obj: dict) -> LinkLabel:
    for name in _LINK_FIELDS:
        if name not in obj:
            raise RecordError(path, lineno, name, "missing")
    if not isinstance(obj["relevant"], bool):
        raise RecordError(path, lineno, "relevant", "must be a boolean")
    try:
        return LinkLabel(
            publication_id=str(obj["publication_id"]),
            url=str(obj["url"]),
            relevant=obj["relevant"],
            anchor_text=str(obj.get("anchor_text", "")),
        )
    except ValueError as exc:
        raise RecordError(path, lineno, "url", str(exc)) from exc


def load_dataset(path) -> tuple[list[PublicationRecord], list[LinkLabel]]:
    root = Path(path)
    pub_path, link_path = root / PUBLICATIONS_FILE, root / LINKS_FILE
    pubs: list[PublicationRecord] = []
    seen_ids: set[str] = set()
    for lineno, obj in _read_jsonl(pub_path):
        pub = _parse_publication(pub_path, lineno, obj)
        if pub.id in seen_ids:
            raise RecordError(pub_path, lineno, "id", f"duplicate publication id {pub.id!r}")
        seen_ids.add(pub.id)
        pubs.append(pub)

    labels: list[LinkLabel] = []
    seen_links: set[tuple[str, str]] = set()
    for lineno, obj in _read_jsonl(link_path):
        label = _parse_link(link_path, lineno, obj)
        if label.publication_id not in seen_ids:
            raise ReferentialIntegrityError(
                f"{link_path}:{lineno}: unknown publication_id {label.publication_id!r}"
            )
        key = (label.publication_id, label.url)
        if key in seen_links:
            raise RecordError(link_path, lineno, "url", f"duplicate link {label.url!r}")
        seen_links.add(key)
        labels.append(label)

    n_self = count_self_links(pubs, labels)
    log.info(
        "loaded %d publications, %d link labels (%d excluding self-links)",
        len(pubs), len(labels), len(labels) - n_self,
    )
    return pubs, labels


def _dump_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def save_dataset(path, publications: Sequence[PublicationRecord], labels: Sequence[LinkLabel]) -> None:
    """Write in canonical order (publications by id, links by (id, url))."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    pubs = sorted(publications, key=lambda p: p.id)
    links = sorted(labels, key=lambda l: (l.publication_id, l.url))
    (root / PUBLICATIONS_FILE).write_text(
        "".join(_dump_line(p.to_json()) + "\n" for p in pubs), encoding="utf-8"
    )
    (root / LINKS_FILE).write_text(
        "".join(_dump_line(l.to_json()) + "\n" for l in links), encoding="utf-8"
    )


# -- splitting and cleaning ----------------------------------------------------


def split_dataset(
    publications: Sequence[PublicationRecord],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetSplit:
    """Stratified per-publisher split; rounding remainders go to train."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    by_publisher: dict[str, list[str]] = defaultdict(list)
    for pub in publications:
        by_publisher[pub.publisher].append(pub.id)

    rng = random.Random(seed)
    train, val, test = [], [], []
    for publisher in sorted(by_publisher):
        ids = sorted(by_publisher[publisher])
        rng.shuffle(ids)
        n = len(ids)
        # epsilon guards against 100 * 0.1 landing just below 10
        n_val = math.floor(n * ratios[1] + 1e-9)
        n_test = math.floor(n * ratios[2] + 1e-9)
        n_train = n - n_val - n_test
        train += ids[:n_train]
        val += ids[n_train : n_train + n_val]
        test += ids[n_train + n_val :]
    return DatasetSplit(tuple(train), tuple(val), tuple(test))


def is_self_link(publication: PublicationRecord, url: str) -> bool:
    return normalize_url(url) == normalize_url(publication.landing_url)


def remove_self_links(publication: PublicationRecord, labels: Sequence[LinkLabel]) -> list[LinkLabel]:
    return [l for l in labels if not is_self_link(publication, l.url)]


def count_self_links(publications: Sequence[PublicationRecord], labels: Sequence[LinkLabel]) -> int:
    landing = {p.id: normalize_url(p.landing_url) for p in publications}
    return sum(1 for l in labels if landing.get(l.publication_id) == normalize_url(l.url))


def group_labels(labels: Iterable[LinkLabel]) -> dict[str, list[LinkLabel]]:
    grouped: dict[str, list[LinkLabel]] = defaultdict(list)
    for label in labels:
        grouped[label.publication_id].append(label)
    return dict(grouped)


# -- statistics ----------------------------------------------------------------


def _mean_sd(values: Sequence[float], sample: bool) -> tuple[float, float]:
    if not values:
        return 0.0, 0.0
    mean = statistics.fmean(values)
    if sample:
        sd = statistics.stdev(values) if len(values) > 1 else 0.0
    else:
        sd = statistics.pstdev(values)
    return mean, sd


def compute_stats(
    publications: Sequence[PublicationRecord],
    labels: Sequence[LinkLabel],
    sample_sd: bool = False,
) -> DatasetStats:
    if not publications:
        raise DatasetError("cannot compute statistics of an empty dataset")
    grouped = group_labels(labels)
    n_links = [len(grouped.get(p.id, ())) for p in publications]
    n_relevant = [sum(l.relevant for l in grouped.get(p.id, ())) for p in publications]
    n_authors = [len(p.authors) for p in publications]
    n_affil = [len(a.affiliations) for p in publications for a in p.authors]

    links_mean, links_sd = _mean_sd(n_links, sample_sd)
    rel_mean, rel_sd = _mean_sd(n_relevant, sample_sd)
    auth_mean, auth_sd = _mean_sd(n_authors, sample_sd)
    aff_mean, aff_sd = _mean_sd(n_affil, sample_sd)
    n_self = count_self_links(publications, labels)
    return DatasetStats(
        n_publications=len(publications),
        n_links=len(labels),
        mean_links_per_page=links_mean,
        sd_links_per_page=links_sd,
        mean_relevant_per_page=rel_mean,
        sd_relevant_per_page=rel_sd,
        mean_authors=auth_mean,
        sd_authors=auth_sd,
        mean_affiliations_per_author=aff_mean,
        sd_affiliations_per_author=aff_sd,
        n_self_links=n_self,
        n_links_excluding_self=len(labels) - n_self,
        sd_convention="sample" if sample_sd else "population",
    )
