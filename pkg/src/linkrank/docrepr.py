"""Uniform layout-aware document representation for HTML and PDF.

Every document becomes an ordered list of text blocks, each with a bounding
box quantized to integers in a 0..1000 space (per page for PDF, per full
document height for HTML).
"""

from __future__ import annotations

import io
import json
import logging
import re
from dataclasses import dataclass, replace
from typing import Optional, Protocol, Sequence

import httpx
from bs4 import BeautifulSoup, Comment, Doctype, NavigableString, Tag

log = logging.getLogger(__name__)

SCALE = 1000
SENTINEL_BOX = (0, 0, 0, 0)
FORMATS = ("html", "pdf")


class ExtractionError(Exception):
    def __init__(self, category: str, message: str):
        self.category = category
        super().__init__(f"{category}: {message}")


class RendererError(Exception):
    pass


class UnsupportedFormat(Exception):
    pass


def collapse_ws(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class TextBlock:
    text: str
    bbox: tuple[int, int, int, int]
    page: int = 0

    def __post_init__(self):
        text = collapse_ws(self.text)
        if not text:
            raise ValueError("text block must contain non-whitespace text")
        object.__setattr__(self, "text", text)
        x0, y0, x1, y1 = self.bbox
        if not (0 <= x0 <= x1 <= SCALE and 0 <= y0 <= y1 <= SCALE):
            raise ValueError(f"bbox outside normalized space: {self.bbox}")
        if self.page < 0:
            raise ValueError("page must be >= 0")
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))


@dataclass(frozen=True)
class DocumentRepresentation:
    source_url: str
    format: str
    blocks: tuple[TextBlock, ...]
    layout_included: bool = True

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ValueError(f"format must be one of {FORMATS}")
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.layout_included and any(b.bbox != SENTINEL_BOX for b in self.blocks):
            raise ValueError("layout-free representation carries bounding boxes")

    @property
    def text(self) -> str:
        return "\n".join(b.text for b in self.blocks)

    def to_dict(self) -> dict:
        return {
            "source_url": self.source_url,
            "format": self.format,
            "layout_included": self.layout_included,
            "blocks": [
                {"text": b.text, "bbox": list(b.bbox), "page": b.page} for b in self.blocks
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "DocumentRepresentation":
        return cls(
            source_url=data["source_url"],
            format=data["format"],
            layout_included=data["layout_included"],
            blocks=tuple(
                TextBlock(b["text"], tuple(b["bbox"]), b["page"]) for b in data["blocks"]
            ),
        )

    @classmethod
    def from_json(cls, text: str) -> "DocumentRepresentation":
        return cls.from_dict(json.loads(text))


def _q(value: float, extent: float) -> int:
    if extent <= 0:
        return 0
    return min(SCALE, max(0, round(value * SCALE / extent)))


def reading_order(blocks: Sequence[TextBlock]) -> list[TextBlock]:
    return sorted(blocks, key=lambda b: (b.page, b.bbox[1], b.bbox[0]))


def to_uniform_json(
    blocks: Sequence[TextBlock], source_url: str, format: str
) -> tuple[DocumentRepresentation, str]:
    rep = DocumentRepresentation(source_url, format, tuple(reading_order(blocks)), True)
    return rep, rep.to_json()


def strip_layout(rep: DocumentRepresentation) -> DocumentRepresentation:
    blocks = tuple(replace(b, bbox=SENTINEL_BOX) for b in rep.blocks)
    return replace(rep, blocks=blocks, layout_included=False)


# -- PDF -----------------------------------------------------------------------


def extract_pdf(body: bytes) -> list[TextBlock]:
    """Line-level text runs, scaled from PDF points via each page's media box.

    The y axis is flipped so that 0 is the top of the page.
    """
    from pdfminer.high_level import extract_pages
    from pdfminer.layout import LTTextContainer, LTTextLine
    from pdfminer.pdfdocument import PDFEncryptionError, PDFPasswordIncorrect
    from pdfminer.pdfparser import PDFSyntaxError
    from pdfminer.psparser import PSException

    if not body.lstrip()[:5].startswith(b"%PDF"):
        raise ExtractionError("not-a-pdf", "missing %PDF header")

    def lines(obj):
        if isinstance(obj, LTTextLine):
            yield obj
        elif isinstance(obj, LTTextContainer) or hasattr(obj, "__iter__"):
            for child in obj:
                yield from lines(child)

    blocks: list[TextBlock] = []
    try:
        for page_no, page in enumerate(extract_pages(io.BytesIO(body))):
            px0, py0, px1, py1 = page.bbox
            width, height = px1 - px0, py1 - py0
            for line in lines(page):
                text = collapse_ws(line.get_text())
                if not text:
                    continue
                x0, y0, x1, y1 = line.bbox
                box = (
                    _q(x0 - px0, width),
                    _q(py1 - y1, height),
                    _q(x1 - px0, width),
                    _q(py1 - y0, height),
                )
                blocks.append(TextBlock(text, box, page_no))
    except (PDFPasswordIncorrect, PDFEncryptionError) as exc:
        raise ExtractionError("encrypted", str(exc) or "encrypted PDF") from exc
    except (PDFSyntaxError, PSException) as exc:
        raise ExtractionError("corrupt", str(exc) or "unparseable PDF") from exc
    except ExtractionError:
        raise
    except Exception as exc:
        raise ExtractionError("corrupt", f"{type(exc).__name__}: {exc}") from exc
    return reading_order(blocks)


# -- HTML: deterministic box model ----------------------------------------------

VIEWPORT_WIDTH = 1280
CHAR_WIDTH = 8
LINE_HEIGHT = 16

_SKIP = {"head", "script", "style", "noscript", "template", "svg", "iframe", "object"}
_BLOCK = {
    "address", "article", "aside", "blockquote", "body", "dd", "details", "dialog",
    "div", "dl", "dt", "fieldset", "figcaption", "figure", "footer", "form", "h1",
    "h2", "h3", "h4", "h5", "h6", "header", "hr", "html", "li", "main", "nav", "ol",
    "p", "pre", "section", "summary", "table", "tbody", "td", "tfoot", "th", "thead",
    "tr", "ul", "caption",
}


@dataclass
class PixelBox:
    text: str
    x0: int
    y0: int
    x1: int
    y1: int


class _FlowLayout:
    def __init__(self):
        self.x = 0
        self.y = 0
        self.boxes: list[PixelBox] = []

    def newline(self):
        if self.x > 0:
            self.y += LINE_HEIGHT
            self.x = 0

    def place(self, text: str):
        words = []
        max_chars = VIEWPORT_WIDTH // CHAR_WIDTH
        for w in text.split():
            words += [w[i : i + max_chars] for i in range(0, len(w), max_chars)]
        if not words:
            return
        x0 = y0 = None
        x1 = 0
        for word in words:
            width = len(word) * CHAR_WIDTH
            start = self.x + CHAR_WIDTH if self.x > 0 else 0
            if start + width > VIEWPORT_WIDTH:
                self.newline()
                start = 0
            if y0 is None:
                y0 = self.y
            x0 = start if x0 is None else min(x0, start)
            x1 = max(x1, start + width)
            self.x = start + width
        self.boxes.append(PixelBox(" ".join(words), x0, y0, x1, self.y + LINE_HEIGHT))

    @property
    def height(self) -> int:
        return max((b.y1 for b in self.boxes), default=0)


def layout_html_px(html) -> tuple[list[PixelBox], int]:
    """Monospace flow layout: returns text-node boxes in pixels and the
    document height."""
    if isinstance(html, bytes):
        html = html.decode("utf-8", errors="replace")
    soup = BeautifulSoup(html, "html.parser")
    flow = _FlowLayout()

    def walk(node):
        for child in node.children:
            if isinstance(child, (Comment, Doctype)):
                continue
            if isinstance(child, NavigableString):
                if type(child) is NavigableString:
                    flow.place(str(child))
                continue
            if not isinstance(child, Tag):
                continue
            name = child.name.lower()
            if name in _SKIP:
                continue
            if name == "br":
                flow.newline()
                continue
            block = name in _BLOCK
            if block:
                flow.newline()
            walk(child)
            if block:
                flow.newline()

    walk(soup)
    return flow.boxes, flow.height


def _scale_px(boxes: Sequence[PixelBox], width: float, height: float) -> list[TextBlock]:
    out = []
    for b in boxes:
        if not collapse_ws(b.text):
            continue
        out.append(
            TextBlock(
                b.text,
                (_q(b.x0, width), _q(b.y0, height), _q(b.x1, width), _q(b.y1, height)),
                0,
            )
        )
    return reading_order(out)


class LayoutProvider(Protocol):
    def render(self, body: bytes, base_url: str) -> list[TextBlock]: ...


class DeterministicLayout:
    name = "deterministic"

    def render(self, body, base_url: str) -> list[TextBlock]:
        boxes, height = layout_html_px(body)
        return _scale_px(boxes, VIEWPORT_WIDTH, height)

    def extract_links(self, body, base_url):
        return []


# -- HTML: external renderer (W3C WebDriver protocol) --------------------------------

_COLLECT_JS = r"""
const out = {nodes: [], links: []};
const de = document.documentElement;
out.width = Math.max(de.scrollWidth, window.innerWidth);
out.height = Math.max(de.scrollHeight, document.body ? document.body.scrollHeight : 0);
const walker = document.createTreeWalker(document.body || de, NodeFilter.SHOW_TEXT);
let n;
while ((n = walker.nextNode())) {
  const p = n.parentElement;
  if (!p || ['SCRIPT','STYLE','NOSCRIPT','TEMPLATE'].includes(p.tagName)) continue;
  const text = n.textContent.replace(/\s+/g, ' ').trim();
  if (!text) continue;
  const r = document.createRange();
  r.selectNodeContents(n);
  const rects = Array.from(r.getClientRects()).filter(q => q.width > 0 && q.height > 0);
  if (!rects.length) continue;
  const sx = window.scrollX, sy = window.scrollY;
  out.nodes.push({
    text: text,
    x0: Math.min(...rects.map(q => q.left)) + sx,
    y0: Math.min(...rects.map(q => q.top)) + sy,
    x1: Math.max(...rects.map(q => q.right)) + sx,
    y1: Math.max(...rects.map(q => q.bottom)) + sy,
  });
}
for (const a of document.querySelectorAll('a[href]')) {
  out.links.push({href: a.href, text: a.innerText || ''});
}
return out;
"""

_WRITE_JS = "document.open(); document.write(arguments[0]); document.close(); return true;"


class WebDriverRenderer:
    """Renders through a WebDriver endpoint (geckodriver, chromedriver, ...).

    The fetched body is written into a blank page with a ``<base>`` element,
    so the browser never re-fetches the document itself.
    """

    name = "external-renderer"

    def __init__(self, endpoint: str, timeout_s: float = 60.0, viewport_height: int = 1024,
                 capabilities: Optional[dict] = None):
        self.endpoint = endpoint.rstrip("/")
        self.timeout_s = timeout_s
        self.viewport_height = viewport_height
        self.capabilities = capabilities or {"alwaysMatch": {"browserName": "firefox"}}

    def _call(self, client: httpx.Client, method: str, path: str, payload=None):
        try:
            resp = client.request(method, self.endpoint + path, json=payload)
        except httpx.HTTPError as exc:
            raise RendererError(f"renderer unreachable at {self.endpoint}: {exc}") from exc
        try:
            data = resp.json()
        except ValueError as exc:
            raise RendererError(f"non-JSON renderer reply ({resp.status_code})") from exc
        if resp.status_code >= 400:
            err = data.get("value", {}) if isinstance(data, dict) else {}
            raise RendererError(f"renderer error {resp.status_code}: {err.get('message', err)}")
        return data.get("value")

    def collect(self, body, base_url: str) -> dict:
        html = body.decode("utf-8", errors="replace") if isinstance(body, bytes) else body
        html = f'<base href="{base_url}">' + html
        with httpx.Client(timeout=self.timeout_s) as client:
            session = self._call(client, "POST", "/session", {"capabilities": self.capabilities})
            sid = session["sessionId"]
            try:
                self._call(client, "POST", f"/session/{sid}/window/rect",
                           {"width": VIEWPORT_WIDTH, "height": self.viewport_height})
                self._call(client, "POST", f"/session/{sid}/url", {"url": "about:blank"})
                self._call(client, "POST", f"/session/{sid}/execute/sync",
                           {"script": _WRITE_JS, "args": [html]})
                return self._call(client, "POST", f"/session/{sid}/execute/sync",
                                  {"script": _COLLECT_JS, "args": []})
            finally:
                try:
                    self._call(client, "DELETE", f"/session/{sid}")
                except RendererError:
                    log.debug("session %s already gone", sid)

    def render(self, body, base_url: str) -> list[TextBlock]:
        data = self.collect(body, base_url)
        width = VIEWPORT_WIDTH
        height = max(float(data.get("height") or 0), max((n["y1"] for n in data["nodes"]), default=0))
        boxes = [
            PixelBox(n["text"], n["x0"], n["y0"], n["x1"], n["y1"]) for n in data["nodes"]
        ]
        return _scale_px(boxes, width, height)

    def extract_links(self, body, base_url: str):
        from .fetcher import LinkRef
        from .urls import is_absolute_http
        from urllib.parse import urldefrag

        data = self.collect(body, base_url)
        out, seen = [], set()
        for link in data.get("links", []):
            url, _ = urldefrag(link["href"])
            if is_absolute_http(url) and url not in seen:
                seen.add(url)
                out.append(LinkRef(collapse_ws(link.get("text", "")), url))
        return out


class FallbackLayout:
    """Try ``primary``; on renderer failure use ``fallback`` (or re-raise)."""

    def __init__(self, primary, fallback=None, on_error: str = "fallback"):
        if on_error not in ("fallback", "fail"):
            raise ValueError("on_error must be 'fallback' or 'fail'")
        self.primary = primary
        self.fallback = fallback or DeterministicLayout()
        self.on_error = on_error
        self.name = primary.name

    def render(self, body, base_url):
        try:
            return self.primary.render(body, base_url)
        except RendererError as exc:
            if self.on_error == "fail":
                raise
            log.warning("falling back to deterministic layout: %s", exc)
            return self.fallback.render(body, base_url)

    def extract_links(self, body, base_url):
        try:
            return self.primary.extract_links(body, base_url)
        except RendererError:
            if self.on_error == "fail":
                raise
            return []


def render_html(body, base_url: str, layout_provider=None) -> list[TextBlock]:
    provider = layout_provider or DeterministicLayout()
    return provider.render(body, base_url)


def make_layout_provider(name: str = "deterministic", endpoint: Optional[str] = None,
                         on_error: str = "fallback"):
    if name == "deterministic":
        return DeterministicLayout()
    if name == "external-renderer":
        if not endpoint:
            raise ValueError("external-renderer needs renderer.endpoint")
        return FallbackLayout(WebDriverRenderer(endpoint), on_error=on_error)
    raise ValueError(f"unknown layout provider {name!r}")


# -- dispatch -------------------------------------------------------------------------

_HTML_TYPES = {"text/html", "application/xhtml+xml"}


def detect_format(media_type: str, body: bytes) -> str:
    mt = (media_type or "").lower()
    if mt == "application/pdf" or body.lstrip()[:5].startswith(b"%PDF"):
        return "pdf"
    if mt in _HTML_TYPES or mt.startswith("text/"):
        return "html"
    head = body[:512].lstrip().lower()
    if head.startswith((b"<!doctype html", b"<html")):
        return "html"
    raise UnsupportedFormat(f"cannot represent media type {media_type!r}")


def represent(resource, layout_provider=None, layout: bool = True) -> DocumentRepresentation:
    """Representation of a fetched resource (anything with ``final_url``,
    ``media_type`` and ``body``)."""
    fmt = detect_format(resource.media_type, resource.body)
    if fmt == "pdf":
        blocks = extract_pdf(resource.body)
    else:
        blocks = render_html(resource.body, resource.final_url, layout_provider)
    rep, _ = to_uniform_json(blocks, resource.final_url, fmt)
    return rep if layout else strip_layout(rep)


# -- serialization into model input and token budget ----------------------------------


def serialize_representation(rep: DocumentRepresentation) -> str:
    """One line per block; ``text x0 y0 x1 y1`` when layout is included."""
    if rep.layout_included:
        return "\n".join(
            f"{b.text} {b.bbox[0]} {b.bbox[1]} {b.bbox[2]} {b.bbox[3]}" for b in rep.blocks
        )
    return "\n".join(b.text for b in rep.blocks)


class WhitespaceTokenizer:
    """Whitespace-delimited tokens.  Deterministic; spans index the input."""

    _token = re.compile(r"\S+")

    def spans(self, text: str) -> list[tuple[int, int]]:
        return [m.span() for m in self._token.finditer(text)]

    def tokenize(self, text: str) -> list[str]:
        return self._token.findall(text)

    def count(self, text: str) -> int:
        return sum(1 for _ in self._token.finditer(text))


def truncate_tokens(serialized_input: str, max_tokens: int, tokenizer=None) -> str:
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    tokenizer = tokenizer or WhitespaceTokenizer()
    spans = tokenizer.spans(serialized_input)
    if len(spans) <= max_tokens:
        return serialized_input
    return serialized_input[: spans[max_tokens - 1][1]]
