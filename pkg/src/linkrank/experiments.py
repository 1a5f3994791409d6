"""End-to-end pipeline and experiment protocols.

bundles -> representations -> frozen base embeddings -> (trained heads) ->
rankings -> metrics.  Protocols: train/validate/test, leave-one-publisher-out,
and the same pipeline with layout stripped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .corpus import DatasetSplit, LinkLabel, PublicationRecord, group_labels
from .docrepr import (
    DocumentRepresentation,
    ExtractionError,
    UnsupportedFormat,
    represent,
    strip_layout,
)
from .embedder import document_input, query_input
from .fetcher import FetchFailure, LinkRef, load_bundle
from .metrics import MetricsReport, QueryResult, evaluate_results, macro_average
from .ranker import RankedList, rank
from .trainer import (
    EmbeddedPublication,
    ProjectionHead,
    TrainConfig,
    TrainingLog,
    build_training_examples,
    provenance,
    train,
)
from .urls import normalize_url

log = logging.getLogger(__name__)


class ExperimentError(Exception):
    pass


@dataclass
class RepresentedPublication:
    publication: PublicationRecord
    landing: DocumentRepresentation
    candidates: list[tuple[LinkLabel, Optional[DocumentRepresentation]]]

    def stripped(self) -> "RepresentedPublication":
        return RepresentedPublication(
            self.publication,
            strip_layout(self.landing),
            [(l, strip_layout(r) if r is not None else None) for l, r in self.candidates],
        )


def _safe_represent(resource, layout_provider) -> Optional[DocumentRepresentation]:
    try:
        return represent(resource, layout_provider)
    except (ExtractionError, UnsupportedFormat) as exc:
        log.info("no representation for %s: %s", resource.final_url, exc)
        return None


def represent_bundle(bundle, layout_provider=None):
    """Landing representation plus ``(LinkRef, repr-or-None)`` per link."""
    landing = represent(bundle.seed, layout_provider)
    out = []
    for link in bundle.links:
        doc = bundle.documents.get(link.url)
        rep = None
        if doc is not None and not isinstance(doc, FetchFailure) and doc.ok:
            rep = _safe_represent(doc, layout_provider)
        out.append((link, rep))
    return landing, out


def represent_dataset(dataset_dir, publications: Sequence[PublicationRecord],
                      labels: Sequence[LinkLabel], layout_provider=None) -> list[RepresentedPublication]:
    """Join labels with crawled bundles under ``<dataset_dir>/bundles/<id>``."""
    root = Path(dataset_dir) / "bundles"
    grouped = group_labels(labels)
    out = []
    for pub in publications:
        bundle_dir = root / pub.id
        if not (bundle_dir / "index.json").is_file():
            raise ExperimentError(f"no crawled bundle for publication {pub.id} at {bundle_dir}")
        bundle = load_bundle(bundle_dir)
        landing, reps = represent_bundle(bundle, layout_provider)
        by_url = {normalize_url(link.url): (link, rep) for link, rep in reps}
        candidates = []
        for label in grouped.get(pub.id, []):
            link, rep = by_url.get(normalize_url(label.url), (None, None))
            if not label.anchor_text and link is not None:
                label = LinkLabel(label.publication_id, label.url, label.relevant, link.anchor_text)
            candidates.append((label, rep))
        out.append(RepresentedPublication(pub, landing, candidates))
    return out


def embed_publication(rp: RepresentedPublication, backend, layout: bool = True) -> EmbeddedPublication:
    landing = rp.landing if layout else strip_layout(rp.landing)
    query = backend.embed(query_input(landing, backend))
    fetched = [(l, r if layout else strip_layout(r)) for l, r in rp.candidates if r is not None]
    texts = [document_input(LinkRef(l.anchor_text, l.url), r, backend) for l, r in fetched]
    vectors = backend.embed_batch(texts) if texts else []
    return EmbeddedPublication(
        publication_id=rp.publication.id,
        publisher=rp.publication.publisher,
        query_url=rp.publication.landing_url,
        query=query,
        docs=tuple((l.url, v) for (l, _), v in zip(fetched, vectors)),
        relevant=frozenset(l.url for l, _ in rp.candidates if l.relevant),
        skipped=tuple(l.url for l, r in rp.candidates if r is None),
        layout_included=layout,
    )


def embed_corpus(represented: Sequence[RepresentedPublication], backend,
                 layout: bool = True) -> list[EmbeddedPublication]:
    return [embed_publication(rp, backend, layout) for rp in represented]


def identity_heads(dim: int) -> tuple[ProjectionHead, ProjectionHead]:
    return ProjectionHead.identity(dim, "query"), ProjectionHead.identity(dim, "document")


def rank_publication(pub: EmbeddedPublication, heads, remove_self: bool = True) -> RankedList:
    qh, dh = heads
    docs = [
        (u, dh.project(v)) for u, v in pub.docs
        if not (remove_self and normalize_url(u) == normalize_url(pub.query_url))
    ]
    if not docs:
        return RankedList(pub.query_url, (), pub.layout_included, pub.skipped)
    return rank(qh.project(pub.query), docs, pub.query_url, pub.layout_included, pub.skipped)


def query_results(pubs: Sequence[EmbeddedPublication], heads, remove_self: bool = True):
    results, rankings = [], {}
    for pub in pubs:
        ranked = rank_publication(pub, heads, remove_self)
        relevant = {
            u for u in pub.relevant
            if not (remove_self and normalize_url(u) == normalize_url(pub.query_url))
        }
        rankings[pub.publication_id] = ranked
        results.append(QueryResult(pub.publication_id, ranked.urls, relevant, pub.publisher))
    return results, rankings


@dataclass
class ExperimentResult:
    report: MetricsReport
    heads: tuple[ProjectionHead, ProjectionHead]
    log: Optional[TrainingLog]
    rankings: dict[str, RankedList] = field(default_factory=dict)


def _select(pubs: Sequence[EmbeddedPublication], ids) -> list[EmbeddedPublication]:
    wanted = set(ids)
    return [p for p in pubs if p.publication_id in wanted]


def train_heads(train_pubs, val_pubs, config: TrainConfig):
    examples = build_training_examples(train_pubs, config)
    if not examples:
        raise ExperimentError("training split produced no examples")
    return train(examples, val_pubs, config)


def run_full(embedded: Sequence[EmbeddedPublication], split: DatasetSplit,
             config: TrainConfig = TrainConfig(), aggregation: str = "macro",
             train_model: bool = True) -> ExperimentResult:
    """Train on the train split (early stopping on validation), test on test."""
    dim = embedded[0].query.shape[0]
    if train_model:
        qh, dh, tlog = train_heads(_select(embedded, split.train),
                                   _select(embedded, split.validation), config)
    else:
        (qh, dh), tlog = identity_heads(dim), None
    results, rankings = query_results(_select(embedded, split.test), (qh, dh))
    return ExperimentResult(evaluate_results(results, aggregation), (qh, dh), tlog, rankings)


@dataclass
class LeaveOneOutResult:
    folds: dict[str, ExperimentResult]
    provenance: dict[str, list[str]]
    average: dict[str, float]

    def to_json(self) -> dict:
        return {
            "per_publisher": {p: r.report.overall for p, r in self.folds.items()},
            "average": self.average,
            "training_provenance": self.provenance,
            "best_epochs": {p: r.log.best_epoch for p, r in self.folds.items() if r.log},
        }


def run_leave_one_out(embedded: Sequence[EmbeddedPublication], split: DatasetSplit,
                      config: TrainConfig = TrainConfig()) -> LeaveOneOutResult:
    """For each publisher: train on the other publishers' train split
    (validate on theirs), evaluate on every publication of the held-out one."""
    publishers = sorted({p.publisher for p in embedded})
    if len(publishers) < 2:
        raise ExperimentError("leave-one-out needs at least two publishers")
    folds, prov = {}, {}
    for held_out in publishers:
        others = [p for p in embedded if p.publisher != held_out]
        train_pubs = _select(others, split.train)
        val_pubs = _select(others, split.validation)
        examples = build_training_examples(train_pubs, config)
        if not examples:
            raise ExperimentError(f"no training examples when holding out {held_out}")
        leaked = provenance(examples) & {p.publication_id for p in embedded if p.publisher == held_out}
        if leaked:
            raise ExperimentError(f"held-out publications leaked into training: {sorted(leaked)}")
        qh, dh, tlog = train(examples, val_pubs, config)
        test = [p for p in embedded if p.publisher == held_out]
        results, rankings = query_results(test, (qh, dh))
        folds[held_out] = ExperimentResult(evaluate_results(results), (qh, dh), tlog, rankings)
        prov[held_out] = sorted(provenance(examples))
        log.info("held out %s: MRR %.4f", held_out, folds[held_out].report.overall["mrr"])
    keys = sorted(set.intersection(*(set(f.report.overall) for f in folds.values())))
    average = {k: macro_average({p: f.report.overall[k] for p, f in folds.items()}) for k in keys}
    return LeaveOneOutResult(folds, prov, average)


def run_ablation_no_layout(represented: Sequence[RepresentedPublication], split: DatasetSplit,
                           backend, config: TrainConfig = TrainConfig(),
                           train_model: bool = True) -> tuple[ExperimentResult, ExperimentResult]:
    """The identical pipeline twice: with layout, and with every
    representation stripped of its boxes.  Returns ``(full, no_layout)``."""
    full = run_full(embed_corpus(represented, backend, layout=True), split, config,
                    train_model=train_model)
    stripped = run_full(embed_corpus(represented, backend, layout=False), split, config,
                        train_model=train_model)
    return full, stripped
