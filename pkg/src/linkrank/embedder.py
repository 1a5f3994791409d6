"""Ranking inputs and embedding backends.

An input is ``anchor [SEP] url [SEP] content`` cut to the backend's token
budget.  Backends return L2-normalized vectors; optional projection heads
(see :mod:`linkrank.trainer`) give the query and document sides their own
linear map on top.
"""

from __future__ import annotations

import hashlib
import logging
import threading
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import httpx
import numpy as np

from .docrepr import (
    DocumentRepresentation,
    WhitespaceTokenizer,
    serialize_representation,
    truncate_tokens,
)

log = logging.getLogger(__name__)

SEP = "[SEP]"
ROLES = ("query", "document")
NORM_TOL = 1e-6


class EmbeddingError(Exception):
    """Backend failed to produce vectors (may be retryable)."""


class ContractError(EmbeddingError):
    """Backend answered, but violated the wire or dimension contract."""


def l2_normalize(values: np.ndarray) -> np.ndarray:
    """Unit vector; the all-zero vector maps to the sentinel e_0."""
    values = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(values))
    if norm == 0.0 or not np.isfinite(norm):
        out = np.zeros_like(values)
        out[0] = 1.0
        return out
    return values / norm


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        arr = np.array(self.values, dtype=np.float64)
        if abs(float(np.linalg.norm(arr)) - 1.0) > NORM_TOL:
            raise ValueError("embedding vectors must have unit norm")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, EmbeddingVector)
            and self.role == other.role
            and np.array_equal(self.values, other.values)
        )

    def tobytes(self) -> bytes:
        return self.values.tobytes()


@dataclass(frozen=True)
class RankingInput:
    anchor_text: str
    url: str
    content: str
    role: str

    def __post_init__(self):
        if self.role == "query" and self.anchor_text:
            raise ValueError("query inputs carry no anchor text")


def build_input(anchor_text: str, url: str, content: str, max_tokens: int = 2048,
                tokenizer=None) -> str:
    for name, value in (("anchor_text", anchor_text), ("url", url)):
        if SEP in value:
            raise ValueError(f"{name} contains the separator literal {SEP!r}")
    joined = f"{anchor_text} {SEP} {url} {SEP} {content}"
    return truncate_tokens(joined, max_tokens, tokenizer)


# -- backends -----------------------------------------------------------------------


class HashBackend:
    """Signed feature hashing of whitespace tokens.

    Each token is hashed with keyed BLAKE2b (8-byte digest, key = the seed as
    8 little-endian bytes).  With ``h`` the digest read as a little-endian
    integer, the bucket is ``h % dim`` and the sign is ``-1`` when bit 63 of
    ``h`` is set.  Counts are accumulated and the vector L2-normalized.
    """

    name = "hash"

    def __init__(self, dim: int = 256, seed: int = 0, max_tokens: int = 2048):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dimension = dim
        self.seed = seed
        self.max_tokens = max_tokens
        self.tokenizer = WhitespaceTokenizer()
        self._key = seed.to_bytes(8, "little", signed=False)

    def bucket_sign(self, token: str) -> tuple[int, int]:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self._key).digest()
        h = int.from_bytes(digest, "little")
        return h % self.dimension, (-1 if h >> 63 else 1)

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for token in self.tokenizer.tokenize(text):
            bucket, sign = self.bucket_sign(token)
            vec[bucket] += sign
        return l2_normalize(vec)

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed(t) for t in texts]


class RemoteBackend:
    """HTTP embedding service.

    Wire contract: ``POST {endpoint}/embed`` with ``{"inputs": [...]}``; the
    reply is ``{"vectors": [[...], ...], "dim": d}``.
    """

    name = "remote"

    def __init__(self, endpoint: str, dim: int, max_tokens: int = 2048, timeout_s: float = 60.0,
                 max_retries: int = 3, backoff_s: float = 0.5, max_in_flight: int = 4,
                 client: Optional[httpx.Client] = None):
        self.endpoint = endpoint.rstrip("/")
        self.dimension = dim
        self.max_tokens = max_tokens
        self.tokenizer = WhitespaceTokenizer()
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self._client = client or httpx.Client(timeout=timeout_s)
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))

    def _post(self, inputs: list[str]) -> dict:
        delay = self.backoff_s
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                with self._slots:
                    resp = self._client.post(self.endpoint + "/embed", json={"inputs": inputs})
                if resp.status_code < 400:
                    return resp.json()
                last = EmbeddingError(f"HTTP {resp.status_code} from {self.endpoint}/embed")
                if resp.status_code < 500 and resp.status_code != 429:
                    break
            except (httpx.HTTPError, ValueError) as exc:
                last = exc
            if attempt < self.max_retries:
                time.sleep(delay)
                delay *= 2
        raise EmbeddingError(f"embedding request failed: {last}") from last

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        texts = list(texts)
        if not texts:
            raise ValueError("inputs must be non-empty")
        data = self._post(texts)
        try:
            vectors, dim = data["vectors"], int(data["dim"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractError(f"malformed embedding reply: {exc}") from exc
        if dim != self.dimension:
            raise ContractError(f"backend declared dim {dim}, expected {self.dimension}")
        if len(vectors) != len(texts):
            raise ContractError(f"got {len(vectors)} vectors for {len(texts)} inputs")
        out = []
        for v in vectors:
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != (self.dimension,):
                raise ContractError(f"vector of shape {arr.shape}, expected ({self.dimension},)")
            out.append(l2_normalize(arr))
        return out

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]


def make_backend(name: str = "hash", dim: int = 256, endpoint: Optional[str] = None,
                 max_tokens: int = 2048, seed: int = 0):
    if name == "hash":
        return HashBackend(dim=dim, seed=seed, max_tokens=max_tokens)
    if name == "remote":
        if not endpoint:
            raise ValueError("remote backend needs embedder.endpoint")
        return RemoteBackend(endpoint, dim=dim, max_tokens=max_tokens)
    raise ValueError(f"unknown embedding backend {name!r}")


# -- encoding paths -------------------------------------------------------------------


def _content(rep: Optional[DocumentRepresentation]) -> str:
    return serialize_representation(rep) if rep is not None else ""


def query_input(landing: DocumentRepresentation, backend) -> str:
    return build_input("", landing.source_url, _content(landing), backend.max_tokens,
                       backend.tokenizer)


def document_input(link, rep: Optional[DocumentRepresentation], backend) -> str:
    return build_input(link.anchor_text, link.url, _content(rep), backend.max_tokens,
                       backend.tokenizer)


def _finish(base: np.ndarray, role: str, head) -> EmbeddingVector:
    values = head.project(base) if head is not None else base
    return EmbeddingVector(values, role)


def embed_query(landing_repr: DocumentRepresentation, backend, head=None) -> EmbeddingVector:
    return _finish(backend.embed(query_input(landing_repr, backend)), "query", head)


def embed_document(link, rep: Optional[DocumentRepresentation], backend, head=None) -> EmbeddingVector:
    return _finish(backend.embed(document_input(link, rep, backend)), "document", head)


def embed_documents(items: Sequence[tuple], backend, head=None) -> list[EmbeddingVector]:
    """Batch form of :func:`embed_document` over ``(link, repr)`` pairs, order kept."""
    if not items:
        return []
    texts = [document_input(link, rep, backend) for link, rep in items]
    return [_finish(v, "document", head) for v in backend.embed_batch(texts)]
