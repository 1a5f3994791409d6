"""One-hop crawler: fetch a seed page, extract its links, fetch every link."""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Union
from urllib import robotparser
from urllib.parse import urldefrag, urljoin

import httpx
from bs4 import BeautifulSoup

from .urls import host_of, is_absolute_http, url_digest

log = logging.getLogger(__name__)

_REDIRECT_CODES = {301, 302, 303, 307, 308}


class FetchError(Exception):
    retryable = False


class TransportError(FetchError):
    """DNS, connect, read or timeout failure."""

    retryable = True


class RedirectPolicyError(FetchError):
    pass


class CrawlError(Exception):
    """The seed could not be fetched, so there is nothing to rank."""


@dataclass(frozen=True)
class FetchPolicy:
    timeout_ms: int = 15000
    max_redirects: int = 5
    max_body_bytes: int = 20 * 1024 * 1024
    per_host_parallelism: int = 4
    per_host_delay_ms: int = 500
    respect_robots: bool = True
    user_agent: str = "linkrank/0.1 (+one-hop bibliographic crawler)"
    max_workers: int = 16

    @classmethod
    def from_mapping(cls, data: dict) -> "FetchPolicy":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True)
class FetchedResource:
    requested_url: str
    final_url: str
    media_type: str
    body: bytes
    status: int
    fetched_at: str
    truncated: bool = False

    def __post_init__(self):
        if not 100 <= self.status <= 599:
            raise ValueError(f"status out of range: {self.status}")
        if not is_absolute_http(self.final_url):
            raise ValueError(f"final_url not absolute: {self.final_url!r}")

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300

    def meta(self) -> dict:
        return {
            "requested_url": self.requested_url,
            "final_url": self.final_url,
            "media_type": self.media_type,
            "status": self.status,
            "fetched_at": self.fetched_at,
            "truncated": self.truncated,
        }


@dataclass(frozen=True)
class FetchFailure:
    url: str
    reason: str
    retryable: bool = False


@dataclass(frozen=True)
class LinkRef:
    anchor_text: str
    url: str


@dataclass
class CrawlBundle:
    seed: FetchedResource
    links: list[LinkRef]
    documents: dict[str, Union[FetchedResource, FetchFailure]] = field(default_factory=dict)

    def failures(self) -> dict[str, FetchFailure]:
        return {u: d for u, d in self.documents.items() if isinstance(d, FetchFailure)}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _media_type(headers: httpx.Headers) -> str:
    ctype = headers.get("content-type", "application/octet-stream")
    return ctype.split(";", 1)[0].strip().lower() or "application/octet-stream"


# -- response cache --------------------------------------------------------------


class ResponseCache:
    """On-disk cache keyed by normalized URL.  Meant for reproducible test runs."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _paths(self, url: str) -> tuple[Path, Path]:
        key = url_digest(url)
        return self.root / f"{key}.json", self.root / f"{key}.body"

    def get(self, url: str) -> Optional[FetchedResource]:
        meta_path, body_path = self._paths(url)
        if not meta_path.is_file():
            return None
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        return FetchedResource(body=body_path.read_bytes(), **meta)

    def put(self, resource: FetchedResource) -> None:
        meta_path, body_path = self._paths(resource.requested_url)
        body_path.write_bytes(resource.body)
        meta_path.write_text(json.dumps(resource.meta(), sort_keys=True), encoding="utf-8")


# -- politeness ------------------------------------------------------------------


class HostThrottle:
    """Caps in-flight requests per host and spaces request starts by a delay."""

    def __init__(self, parallelism: int, delay_s: float):
        self.parallelism = max(1, parallelism)
        self.delay_s = max(0.0, delay_s)
        self._lock = threading.Lock()
        self._sems: dict[str, threading.BoundedSemaphore] = {}
        self._next_start: dict[str, float] = {}

    def _sem(self, host: str) -> threading.BoundedSemaphore:
        with self._lock:
            if host not in self._sems:
                self._sems[host] = threading.BoundedSemaphore(self.parallelism)
            return self._sems[host]

    def run(self, host: str, fn: Callable[[], object]):
        sem = self._sem(host)
        with sem:
            with self._lock:
                now = time.monotonic()
                start = max(now, self._next_start.get(host, now))
                self._next_start[host] = start + self.delay_s
            wait = start - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            return fn()


# -- fetching ---------------------------------------------------------------------


def _read_limited(response: httpx.Response, limit: int) -> tuple[bytes, bool]:
    chunks, size = [], 0
    for chunk in response.iter_bytes():
        if size + len(chunk) > limit:
            chunks.append(chunk[: limit - size])
            return b"".join(chunks), True
        chunks.append(chunk)
        size += len(chunk)
    return b"".join(chunks), False


def make_client(policy: FetchPolicy) -> httpx.Client:
    return httpx.Client(
        follow_redirects=False,
        timeout=policy.timeout_ms / 1000.0,
        headers={"User-Agent": policy.user_agent},
    )


def fetch(
    url: str,
    policy: FetchPolicy = FetchPolicy(),
    client: Optional[httpx.Client] = None,
    cache: Optional[ResponseCache] = None,
) -> FetchedResource:
    """Fetch ``url`` following up to ``policy.max_redirects`` redirects.

    Non-2xx final responses are returned with their status; only transport
    failures and redirect-policy violations raise.
    """
    if not is_absolute_http(url):
        raise ValueError(f"url must be absolute http(s): {url!r}")
    if cache is not None:
        hit = cache.get(url)
        if hit is not None:
            return hit

    own_client = client is None
    client = client or make_client(policy)
    try:
        current, seen = url, {url}
        for _ in range(policy.max_redirects + 1):
            try:
                with client.stream("GET", current) as resp:
                    if resp.status_code in _REDIRECT_CODES and "location" in resp.headers:
                        nxt = urljoin(current, resp.headers["location"])
                        if nxt in seen:
                            raise RedirectPolicyError(f"redirect loop at {nxt}")
                        seen.add(nxt)
                        current = nxt
                        continue
                    body, truncated = _read_limited(resp, policy.max_body_bytes)
                    resource = FetchedResource(
                        requested_url=url,
                        final_url=current,
                        media_type=_media_type(resp.headers),
                        body=body,
                        status=resp.status_code,
                        fetched_at=_now(),
                        truncated=truncated,
                    )
                    break
            except httpx.TransportError as exc:
                raise TransportError(f"{type(exc).__name__} fetching {current}: {exc}") from exc
        else:
            raise RedirectPolicyError(
                f"more than {policy.max_redirects} redirects starting at {url}"
            )
    finally:
        if own_client:
            client.close()
    if cache is not None:
        cache.put(resource)
    return resource


# -- link extraction ---------------------------------------------------------------


def _collapse(text: str) -> str:
    return " ".join(text.split())


def decode_html(body: bytes) -> str:
    return body.decode("utf-8", errors="replace")


def extract_links(html: Union[bytes, str], base_url: str) -> list[LinkRef]:
    """All ``a[href]`` targets in document order, resolved and de-duplicated.

    Only http(s) targets survive; fragment-only hrefs are dropped.  The first
    anchor text seen for a URL wins; image anchors fall back to ``alt`` text.
    """
    if isinstance(html, bytes):
        html = decode_html(html)
    soup = BeautifulSoup(html, "html.parser")
    base = base_url
    base_tag = soup.find("base", href=True)
    if base_tag is not None:
        base = urljoin(base_url, base_tag["href"].strip())

    out: list[LinkRef] = []
    seen: set[str] = set()
    for a in soup.find_all("a", href=True):
        href = a["href"].strip()
        if not href or href.startswith("#"):
            continue
        url, _ = urldefrag(urljoin(base, href))
        if not is_absolute_http(url) or url in seen:
            continue
        text = _collapse(a.get_text(" "))
        if not text:
            alts = [img.get("alt", "") for img in a.find_all("img")]
            text = _collapse(" ".join(alts))
        seen.add(url)
        out.append(LinkRef(anchor_text=text, url=url))
    return out


def merge_links(primary: list[LinkRef], extra: list[LinkRef]) -> list[LinkRef]:
    seen = {l.url for l in primary}
    merged = list(primary)
    for link in extra:
        if link.url not in seen:
            seen.add(link.url)
            merged.append(link)
    return merged


# -- crawling -----------------------------------------------------------------------


class RobotsGate:
    def __init__(self, client: httpx.Client, policy: FetchPolicy):
        self.client = client
        self.policy = policy
        self._parsers: dict[str, robotparser.RobotFileParser] = {}
        self._lock = threading.Lock()

    def allowed(self, url: str) -> bool:
        parts = httpx.URL(url)
        root = f"{parts.scheme}://{parts.netloc.decode()}"
        with self._lock:
            parser = self._parsers.get(root)
            if parser is None:
                parser = robotparser.RobotFileParser()
                try:
                    resp = self.client.get(root + "/robots.txt")
                    lines = resp.text.splitlines() if resp.status_code == 200 else []
                except httpx.HTTPError:
                    lines = []
                parser.parse(lines)
                self._parsers[root] = parser
        return parser.can_fetch(self.policy.user_agent, url)


def crawl_one_hop(
    seed_url: str,
    policy: FetchPolicy = FetchPolicy(),
    cache: Optional[ResponseCache] = None,
    renderer=None,
) -> CrawlBundle:
    """Fetch the seed, then every link it contains, and nothing else.

    ``renderer`` (optional) is an object with ``extract_links(body, base_url)``
    whose links are merged after the static ones.
    """
    with make_client(policy) as client:
        try:
            seed = fetch(seed_url, policy, client=client, cache=cache)
        except FetchError as exc:
            raise CrawlError(f"seed fetch failed: {exc}") from exc
        if not seed.ok:
            raise CrawlError(f"seed returned HTTP {seed.status}: {seed_url}")

        links = extract_links(seed.body, seed.final_url)
        if renderer is not None:
            try:
                links = merge_links(links, renderer.extract_links(seed.body, seed.final_url))
            except Exception as exc:  # renderer is best effort for links
                log.warning("rendered link pass failed: %s", exc)

        throttle = HostThrottle(policy.per_host_parallelism, policy.per_host_delay_ms / 1000.0)
        robots = RobotsGate(client, policy) if policy.respect_robots else None

        def get(link: LinkRef):
            if robots is not None and not robots.allowed(link.url):
                return FetchFailure(link.url, "disallowed by robots.txt")
            try:
                if cache is not None:
                    hit = cache.get(link.url)
                    if hit is not None:
                        return hit
                return throttle.run(
                    host_of(link.url), lambda: fetch(link.url, policy, client=client, cache=cache)
                )
            except FetchError as exc:
                return FetchFailure(link.url, str(exc), exc.retryable)

        with ThreadPoolExecutor(max_workers=max(1, policy.max_workers)) as pool:
            results = list(pool.map(get, links))

    bundle = CrawlBundle(seed=seed, links=links)
    for link, result in zip(links, results):
        bundle.documents[link.url] = result
    log.info(
        "crawled %s: %d links, %d failures", seed_url, len(links), len(bundle.failures())
    )
    return bundle


# -- bundle persistence ----------------------------------------------------------------

BUNDLE_SCHEMA_VERSION = 1


def save_bundle(bundle: CrawlBundle, out_dir) -> Path:
    """``index.json`` plus ``bodies/<sha256 of normalized url>``."""
    root = Path(out_dir)
    bodies = root / "bodies"
    bodies.mkdir(parents=True, exist_ok=True)

    def store(resource: FetchedResource) -> dict:
        name = url_digest(resource.requested_url)
        (bodies / name).write_bytes(resource.body)
        return {**resource.meta(), "body": f"bodies/{name}"}

    documents = {}
    for url, doc in bundle.documents.items():
        if isinstance(doc, FetchFailure):
            documents[url] = {"failure": doc.reason, "retryable": doc.retryable}
        else:
            documents[url] = store(doc)
    index = {
        "schema_version": BUNDLE_SCHEMA_VERSION,
        "seed": store(bundle.seed),
        "links": [{"anchor_text": l.anchor_text, "url": l.url} for l in bundle.links],
        "documents": documents,
    }
    path = root / "index.json"
    path.write_text(json.dumps(index, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_bundle(bundle_dir) -> CrawlBundle:
    root = Path(bundle_dir)
    index = json.loads((root / "index.json").read_text(encoding="utf-8"))

    def restore(entry: dict) -> FetchedResource:
        meta = {k: v for k, v in entry.items() if k != "body"}
        return FetchedResource(body=(root / entry["body"]).read_bytes(), **meta)

    documents: dict[str, Union[FetchedResource, FetchFailure]] = {}
    for url, entry in index["documents"].items():
        if "failure" in entry:
            documents[url] = FetchFailure(url, entry["failure"], entry.get("retryable", False))
        else:
            documents[url] = restore(entry)
    links = [LinkRef(l["anchor_text"], l["url"]) for l in index["links"]]
    return CrawlBundle(seed=restore(index["seed"]), links=links, documents=documents)
