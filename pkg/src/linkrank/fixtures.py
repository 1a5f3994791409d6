"""Synthetic publisher sites and a local HTTP server to crawl them.

Used by the test suite and for offline demos.  Every publication gets a
landing page whose relevant links (PDF, citation export, supplement, author
profiles) repeat paper-specific pseudo-words, while irrelevant links
(navigation, other articles, external pages) do not.
"""

from __future__ import annotations

import io
import random
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import urlsplit

from .corpus import AuthorRecord, LinkLabel, PublicationRecord, save_dataset

PUBLISHERS = ("aurora", "borealis", "cascade", "delta", "ember", "fjord")
GENERIC = (
    "the of and a to in is for on with that by this we are from as an be our results "
    "method approach data model paper study using based show propose new system"
).split()


@dataclass
class Route:
    status: int = 200
    content_type: str = "text/html; charset=utf-8"
    body: bytes = b""
    location: Optional[str] = None
    delay_s: float = 0.0


@dataclass
class RequestRecord:
    path: str
    started: float
    finished: float = 0.0


class FixtureServer:
    """Threaded HTTP server serving a route table and logging every request."""

    def __init__(self, routes: Optional[dict[str, Route]] = None):
        self.routes: dict[str, Route] = dict(routes or {})
        self.log: list[RequestRecord] = []
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):  # noqa: N802
                rec = RequestRecord(self.path, time.monotonic())
                with server._lock:
                    server.log.append(rec)
                route = server.routes.get(urlsplit(self.path).path)
                if route is None:
                    route = Route(404, "text/html", b"<html><body><p>Not found</p></body></html>")
                if route.delay_s:
                    time.sleep(route.delay_s)
                self.send_response(route.status)
                if route.location:
                    self.send_header("Location", route.location)
                self.send_header("Content-Type", route.content_type)
                self.send_header("Content-Length", str(len(route.body)))
                self.end_headers()
                self.wfile.write(route.body)
                rec.finished = time.monotonic()

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.httpd.daemon_threads = True
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def url(self, path: str) -> str:
        return self.base_url + path

    def requested_paths(self) -> list[str]:
        with self._lock:
            return [r.path for r in self.log]

    def clear_log(self):
        with self._lock:
            self.log.clear()

    def start(self) -> "FixtureServer":
        self._thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


# -- content generation ---------------------------------------------------------------


class _Words:
    _cons = "bcdfghjklmnprstvz"
    _vow = "aeiou"

    def __init__(self, rng: random.Random):
        self.rng = rng
        self.used: set[str] = set(GENERIC)

    def word(self) -> str:
        while True:
            n = self.rng.randint(2, 4)
            w = "".join(self.rng.choice(self._cons) + self.rng.choice(self._vow) for _ in range(n))
            if w not in self.used:
                self.used.add(w)
                return w

    def words(self, n: int) -> list[str]:
        return [self.word() for _ in range(n)]


def _html(title: str, body: str) -> bytes:
    return (
        f"<!DOCTYPE html><html><head><title>{title}</title>"
        f"<style>body{{font-family:sans-serif}}</style></head><body>{body}</body></html>"
    ).encode("utf-8")


def make_pdf(header: list[str], body_words: list[str], pagesize=(612, 792),
             words_per_line: int = 20) -> bytes:
    """Paper-style PDF: centered header lines, then the body text."""
    from reportlab.pdfgen import canvas

    buf = io.BytesIO()
    width, height = pagesize
    c = canvas.Canvas(buf, pagesize=pagesize, invariant=1)
    y = height - 72
    for i, line in enumerate(header):
        c.setFont("Helvetica-Bold" if i == 0 else "Helvetica", 14 if i == 0 else 9)
        c.drawCentredString(width / 2, y, line)
        y -= 20 if i == 0 else 13
    c.setFont("Helvetica", 7)
    y -= 10
    for j in range(0, len(body_words), words_per_line):
        c.drawString(40, y, " ".join(body_words[j:j + words_per_line]))
        y -= 10
    c.showPage()
    c.save()
    return buf.getvalue()


@dataclass
class FixturePaper:
    pub_id: str
    publisher: str
    title: list[str]
    authors: list[str]
    abstract: list[str]
    keywords: list[str] = field(default_factory=list)


@dataclass
class FixtureCorpus:
    routes: dict[str, Route]
    publications: list[PublicationRecord]
    labels: list[LinkLabel]
    papers: dict[str, FixturePaper] = field(default_factory=dict)

    def doi_url(self, base_url: str, pub_id: str) -> str:
        return f"{base_url}/doi/10.5555/{pub_id}"

    def write_dataset(self, path) -> None:
        """``publications.jsonl`` + ``links.jsonl`` under ``path``."""
        save_dataset(path, self.publications, self.labels)


def build_fixture_corpus(base_url: str, publishers=PUBLISHERS, pages_per_publisher: int = 10,
                         seed: int = 0, broken_link_every: int = 4,
                         related_landing_pages: int = 0, related_teasers: int = 4) -> FixtureCorpus:
    """Generate the site content and labels for ``len(publishers) x pages``
    publications, each with roughly 20 outgoing links and 2-6 relevant ones
    (not counting the self-link).

    ``related_landing_pages`` links each page to other landing pages of the
    same publisher.  Those share layout and boilerplate with the query page
    and are hard negatives for untrained heads; ``related_teasers`` links to
    short teaser pages of other papers instead.
    """
    rng = random.Random(seed)
    words = _Words(rng)
    routes: dict[str, Route] = {}
    papers: dict[str, FixturePaper] = {}
    pubs: list[PublicationRecord] = []
    labels: list[LinkLabel] = []

    for publisher in publishers:
        brand = words.words(3)
        nav = ["home", "about", "journals", "contact", "privacy", "help", "login", "cookies"]
        for name in nav:
            filler = [rng.choice(GENERIC) for _ in range(25)] + words.words(5)
            routes[f"/{publisher}/{name}"] = Route(body=_html(
                f"{publisher} {name}",
                f"<header><p>{publisher.title()} {' '.join(brand)}</p></header>"
                f"<h1>{name.title()}</h1><p>{' '.join(filler)}</p>",
            ))
        for i in range(pages_per_publisher):
            pid = f"{publisher}-{i:02d}"
            papers[pid] = FixturePaper(
                pid, publisher, words.words(6),
                [f"{a} {b}" for a, b in zip(words.words(4), words.words(4))][: rng.randint(2, 4)],
                words.words(150),
                words.words(10),
            )

    external = {
        "/ext/license": "Creative commons attribution license terms " + " ".join(GENERIC[:12]),
        "/ext/share": "Share this article on social media " + " ".join(GENERIC[5:18]),
    }
    for path, text in external.items():
        routes[path] = Route(body=_html(path, f"<p>{text}</p>"))

    ids = sorted(papers)
    for n, pid in enumerate(ids):
        paper = papers[pid]
        publisher = paper.publisher
        title = " ".join(paper.title)
        landing_path = f"/{publisher}/article/{pid}"
        landing_url = base_url + landing_path
        routes[f"/doi/10.5555/{pid}"] = Route(302, "text/html", b"", location=landing_url)

        relevant: list[tuple[str, str]] = []
        routes[f"{landing_path}/pdf"] = Route(
            content_type="application/pdf",
            body=make_pdf(
                [title, ", ".join(paper.authors), f"DOI 10.5555/{pid}",
                 "Keywords: " + " ".join(paper.keywords)],
                paper.abstract,
            ),
        )
        relevant.append(("Download PDF", f"{landing_path}/pdf"))
        routes[f"{landing_path}/cite"] = Route(
            content_type="text/plain",
            body=(f"@article{{{pid}, title={{{title}}}, author={{{' and '.join(paper.authors)}}}, "
                  f"doi={{10.5555/{pid}}}, keywords={{{' '.join(paper.keywords)}}}, "
                  f"abstract={{{' '.join(paper.abstract[:80])}}}}}").encode(),
        )
        relevant.append(("Cite this article", f"{landing_path}/cite"))
        n_rel = rng.randint(2, 6)
        extras = [("Supplementary material", f"{landing_path}/supplement")]
        extras += [(a, f"/people/{a.replace(' ', '-')}") for a in paper.authors]
        for anchor, path in extras[: n_rel - 2]:
            if path.endswith("/supplement"):
                body = _html(f"Supplement {title}",
                             f"<h1>Supplementary material: {title}</h1>"
                             f"<p>{' '.join(paper.abstract[:100])}</p>"
                             f"<p>{' '.join(paper.keywords)}</p>")
            else:
                body = _html(anchor, f"<h1>{anchor}</h1><h2>Publications</h2>"
                                     f"<ul><li>{title}</li><li>{' '.join(paper.keywords)}</li>"
                                     f"<li>{' '.join(paper.abstract[30:70])}</li></ul>")
            routes[path] = Route(body=body)
            relevant.append((anchor, path))

        irrelevant = [(name.title(), f"/{publisher}/{name}") for name in
                      ["home", "about", "journals", "contact", "privacy", "help", "login", "cookies"]]
        irrelevant += [("License", "/ext/license"), ("Share", "/ext/share")]
        same_pub = [p for p in ids if papers[p].publisher == publisher and p != pid]
        others = rng.sample(same_pub, min(related_landing_pages + related_teasers, len(same_pub)))
        for j, other in enumerate(others):
            anchor = " ".join(papers[other].title[:3])
            if j < related_landing_pages:
                irrelevant.append((anchor, f"/{publisher}/article/{other}"))
            else:
                path = f"/{publisher}/teaser/{other}"
                routes[path] = Route(body=_html(anchor, (
                    f"<h3>{' '.join(papers[other].title)}</h3>"
                    f"<p>{' '.join(papers[other].abstract[:8])} ...</p>")))
                irrelevant.append((anchor, path))
        if broken_link_every and n % broken_link_every == 0:
            irrelevant.append(("Dataset", f"{landing_path}/dataset-missing"))

        anchors = [(a, p, True) for a, p in relevant] + [(a, p, False) for a, p in irrelevant]
        rng.shuffle(anchors)
        anchors.insert(0, ("Permalink", landing_path, True))
        # link grid, three per row
        link_html = "".join(
            "<div>" + " ".join(f'<a href="{p}">{a}</a>' for a, p, _ in anchors[r:r + 3]) + "</div>"
            for r in range(0, len(anchors), 3)
        )
        body = (
            f"<header><p>{publisher.title()} Digital Library &gt; {title}</p>"
            f"<nav><a href=\"#main\">Skip to content</a></nav></header>"
            f"<main id=\"main\"><h1>{title}</h1><p>{', '.join(paper.authors)}</p>"
            f"<p>DOI 10.5555/{pid}</p><h2>Abstract</h2><p>{' '.join(paper.abstract)}</p>"
            f"<p>Keywords: {' '.join(paper.keywords)}</p>"
            f"<p>Cite as: {', '.join(paper.authors)}. {title}. 10.5555/{pid}</p>"
            f"<nav>{link_html}</nav></main>"
            f"<footer><p>Copyright {publisher.title()}</p>"
            f"<a href=\"mailto:help@{publisher}.test\">Email us</a></footer>"
        )
        routes[landing_path] = Route(body=_html(title, body))

        pubs.append(PublicationRecord(
            id=pid, doi=f"10.5555/{pid}", publisher=publisher, title=title,
            year=2000 + n % 25, landing_url=landing_url,
            authors=tuple(AuthorRecord(a, (f"{publisher.title()} University",)) for a in paper.authors),
        ))
        for anchor, path, rel in anchors:
            labels.append(LinkLabel(pid, base_url + path, rel, anchor))

    return FixtureCorpus(routes, pubs, labels, papers)
