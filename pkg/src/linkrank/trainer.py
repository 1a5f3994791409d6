"""Contrastive (InfoNCE) training of query/document projection heads.

The backend stays frozen: training only learns two ``d x d`` matrices that
map base embeddings into the ranking space, each output re-normalized.
"""

from __future__ import annotations

import json
import logging
import math
import random
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .embedder import l2_normalize
from .metrics import QueryResult, reciprocal_rank
from .ranker import rank
from .urls import normalize_url

log = logging.getLogger(__name__)

HEADS_SCHEMA_VERSION = 1


class TrainingError(Exception):
    pass


@dataclass
class ProjectionHead:
    weights: np.ndarray
    role: str

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        n, m = self.weights.shape
        if n != m:
            raise ValueError("projection weights must be square")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("projection weights must be finite")

    @classmethod
    def identity(cls, dim: int, role: str) -> "ProjectionHead":
        return cls(np.eye(dim), role)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def project(self, base: np.ndarray) -> np.ndarray:
        return l2_normalize(self.weights @ np.asarray(base, dtype=np.float64))

    def project_many(self, base: np.ndarray) -> np.ndarray:
        return np.stack([self.project(row) for row in np.atleast_2d(base)])


def save_heads(path, query: ProjectionHead, document: ProjectionHead) -> Path:
    path = Path(path)
    payload = {
        "schema_version": HEADS_SCHEMA_VERSION,
        "dim": query.dim,
        "query": query.weights.tolist(),
        "document": document.weights.tolist(),
    }
    path.write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")), encoding="utf-8")
    return path


def load_heads(path) -> tuple[ProjectionHead, ProjectionHead]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("schema_version") != HEADS_SCHEMA_VERSION:
        raise ValueError(f"unsupported heads file version {data.get('schema_version')!r}")
    return ProjectionHead(data["query"], "query"), ProjectionHead(data["document"], "document")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-5
    accumulation_steps: int = 32
    patience: int = 5
    max_epochs: int = 100
    temperature: float = 0.05
    negatives_per_positive: int = 7
    batch_size: int = 8
    momentum: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.temperature <= 0:
            raise ValueError("learning_rate must be >= 0 and temperature > 0")
        for name in ("accumulation_steps", "patience", "max_epochs",
                     "negatives_per_positive", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")

    @classmethod
    def from_mapping(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True, eq=False)
class EmbeddedPublication:
    """Frozen base embeddings for one landing page and its fetched links."""

    publication_id: str
    publisher: str
    query_url: str
    query: np.ndarray
    docs: tuple[tuple[str, np.ndarray], ...]
    relevant: frozenset[str]
    skipped: tuple[str, ...] = ()
    layout_included: bool = True


@dataclass(frozen=True, eq=False)
class TrainingExample:
    query_vec: np.ndarray
    positive_vec: np.ndarray
    negative_vecs: np.ndarray
    publication_id: str = ""
    positive_url: str = ""
    negative_sources: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.negative_vecs) < 1:
            raise ValueError("a training example needs at least one negative")


# -- loss ---------------------------------------------------------------------------


def info_nce_loss(q, pos, negs, temperature: float):
    """InfoNCE with inner-product similarities.

    Returns ``(loss, grad_q, grad_pos, grad_negs)``, gradients taken with
    respect to the (already projected) vectors themselves.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    q = np.asarray(q, dtype=np.float64)
    cands = np.vstack([np.asarray(pos, dtype=np.float64)[None, :],
                       np.atleast_2d(np.asarray(negs, dtype=np.float64))])
    logits = cands @ q / temperature
    shift = logits.max()
    exp = np.exp(logits - shift)
    total = exp.sum()
    loss = float(-(logits[0] - shift) + math.log(total))
    coeff = exp / total
    coeff[0] -= 1.0
    coeff /= temperature
    grad_q = coeff @ cands
    grad_c = np.outer(coeff, q)
    return loss, grad_q, grad_c[0], grad_c[1:]


def _project_with_jacobian(weights: np.ndarray, base: np.ndarray):
    u = base @ weights.T
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    norms = np.where(norms == 0, 1.0, norms)
    return u / norms, norms


def _back_normalize(v: np.ndarray, norms: np.ndarray, grad_v: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``u`` given the gradient w.r.t. ``v = u / |u|``."""
    radial = np.sum(v * grad_v, axis=-1, keepdims=True)
    return (grad_v - v * radial) / norms


def example_loss_and_grads(example: TrainingExample, wq: np.ndarray, wd: np.ndarray,
                           temperature: float):
    """Loss of one example and gradients w.r.t. both projection matrices."""
    qv, qn = _project_with_jacobian(wq, example.query_vec[None, :])
    cand_base = np.vstack([example.positive_vec[None, :], example.negative_vecs])
    cv, cn = _project_with_jacobian(wd, cand_base)
    loss, g_q, g_pos, g_negs = info_nce_loss(qv[0], cv[0], cv[1:], temperature)
    g_c = np.vstack([g_pos[None, :], g_negs])
    gu_q = _back_normalize(qv, qn, g_q[None, :])
    gu_c = _back_normalize(cv, cn, g_c)
    return loss, np.outer(gu_q[0], example.query_vec), gu_c.T @ cand_base


# -- examples ------------------------------------------------------------------------


def build_training_examples(publications: Sequence[EmbeddedPublication],
                            config: TrainConfig = TrainConfig()) -> list[TrainingExample]:
    """One example per (landing page, relevant link).

    Negatives come from the page's own irrelevant links, sampled without
    replacement; short pages are padded with irrelevant links from other
    pages of the same publisher.
    """
    rng = random.Random(config.rng_seed)
    n_neg = config.negatives_per_positive
    pubs = sorted(publications, key=lambda p: p.publication_id)

    pool: dict[str, list[tuple[str, str, np.ndarray]]] = defaultdict(list)
    for pub in pubs:
        for url, vec in sorted(pub.docs, key=lambda d: d[0]):
            if url not in pub.relevant:
                pool[pub.publisher].append((pub.publication_id, url, vec))

    examples = []
    for pub in pubs:
        docs = sorted(pub.docs, key=lambda d: d[0])
        positives = [(u, v) for u, v in docs if u in pub.relevant]
        in_page = [(pub.publication_id, u, v) for u, v in docs if u not in pub.relevant]
        if not positives:
            log.warning("publication %s has no relevant fetched links; skipped", pub.publication_id)
            continue
        cross = [c for c in pool[pub.publisher] if c[0] != pub.publication_id]
        for url, vec in positives:
            if len(in_page) >= n_neg:
                chosen = rng.sample(in_page, n_neg)
            else:
                need = min(n_neg - len(in_page), len(cross))
                chosen = list(in_page) + rng.sample(cross, need)
            if not chosen:
                log.warning("no negatives available for %s; skipped", pub.publication_id)
                continue
            examples.append(TrainingExample(
                query_vec=pub.query,
                positive_vec=vec,
                negative_vecs=np.stack([c[2] for c in chosen]),
                publication_id=pub.publication_id,
                positive_url=url,
                negative_sources=tuple(c[0] for c in chosen),
            ))
    return examples


def provenance(examples: Sequence[TrainingExample]) -> set[str]:
    """Every publication id that contributed a query, positive or negative."""
    ids = set()
    for ex in examples:
        ids.add(ex.publication_id)
        ids.update(ex.negative_sources)
    return ids


# -- training loop ---------------------------------------------------------------------


class EarlyStopping:
    """Stop once the monitored value has not improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best + 1e-12:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def validation_mrr(publications: Sequence[EmbeddedPublication], query_head: ProjectionHead,
                   doc_head: ProjectionHead) -> float:
    """Mean reciprocal rank with self-links removed, as for test queries."""
    rrs = []
    for pub in publications:
        own = normalize_url(pub.query_url)
        docs = [(u, doc_head.project(v)) for u, v in pub.docs if normalize_url(u) != own]
        if not docs:
            rrs.append(0.0)
            continue
        ranked = rank(query_head.project(pub.query), docs)
        rrs.append(reciprocal_rank(QueryResult(pub.publication_id, ranked.urls, pub.relevant)))
    return math.fsum(rrs) / len(rrs) if rrs else 0.0


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    n_examples: int = 0
    provenance: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def train(examples: Sequence[TrainingExample], val: Sequence[EmbeddedPublication],
          config: TrainConfig = TrainConfig(), dim: Optional[int] = None):
    """Mini-batch SGD with gradient accumulation and early stopping on
    validation MRR (training loss when there is no validation set).

    Returns ``(query_head, document_head, TrainingLog)`` for the best epoch.
    """
    if not examples:
        raise TrainingError("no training examples")
    dim = dim or examples[0].query_vec.shape[0]
    wq, wd = np.eye(dim), np.eye(dim)
    vq, vd = np.zeros_like(wq), np.zeros_like(wd)
    best = (wq.copy(), wd.copy())
    stopper = EarlyStopping(config.patience)
    tlog = TrainingLog(n_examples=len(examples), provenance=sorted(provenance(examples)))
    order = list(range(len(examples)))

    for epoch in range(1, config.max_epochs + 1):
        random.Random(config.rng_seed * 1_000_003 + epoch).shuffle(order)
        acc_q, acc_d = np.zeros_like(wq), np.zeros_like(wd)
        n_acc, losses = 0, []

        def step():
            nonlocal wq, wd, vq, vd, acc_q, acc_d, n_acc
            gq, gd = acc_q / n_acc, acc_d / n_acc
            vq = config.momentum * vq + gq
            vd = config.momentum * vd + gd
            wq = wq - config.learning_rate * vq
            wd = wd - config.learning_rate * vd
            acc_q, acc_d, n_acc = np.zeros_like(wq), np.zeros_like(wd), 0

        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            bq, bd, bl = np.zeros_like(wq), np.zeros_like(wd), 0.0
            for ex in batch:
                loss, gq, gd = example_loss_and_grads(ex, wq, wd, config.temperature)
                if not math.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} on {ex.publication_id}/{ex.positive_url}"
                    )
                bl += loss
                bq += gq
                bd += gd
            losses.append(bl / len(batch))
            acc_q += bq / len(batch)
            acc_d += bd / len(batch)
            n_acc += 1
            if n_acc == config.accumulation_steps:
                step()
        if n_acc:
            step()

        heads = ProjectionHead(wq, "query"), ProjectionHead(wd, "document")
        mean_loss = math.fsum(losses) / len(losses)
        monitored = validation_mrr(val, *heads) if val else -mean_loss
        stop = stopper.update(epoch, monitored)
        improved = stopper.best_epoch == epoch
        if improved:
            best = (wq.copy(), wd.copy())
        tlog.epochs.append({"epoch": epoch, "loss": mean_loss,
                            "val_mrr": monitored if val else None, "improved": improved})
        log.info("epoch %d loss %.5f val %.4f%s", epoch, mean_loss, monitored,
                 " *" if improved else "")
        tlog.stopped_epoch = epoch
        if stop:
            break

    tlog.best_epoch = stopper.best_epoch
    return ProjectionHead(best[0], "query"), ProjectionHead(best[1], "document"), tlog
