"""URL helpers shared by the crawler, the dataset and the bundle store."""

from __future__ import annotations

import hashlib
from urllib.parse import urlsplit, urlunsplit

_DEFAULT_PORTS = {"http": 80, "https": 443}


def is_absolute_http(url: str) -> bool:
    try:
        parts = urlsplit(url)
    except ValueError:
        return False
    return parts.scheme.lower() in ("http", "https") and bool(parts.netloc)


def normalize_url(url: str) -> str:
    """Canonical form used for equality: lowercase scheme/host, no default
    port, no fragment, no trailing slash on the path."""
    parts = urlsplit(url.strip())
    scheme = parts.scheme.lower()
    host = (parts.hostname or "").lower()
    if parts.port and parts.port != _DEFAULT_PORTS.get(scheme):
        host = f"{host}:{parts.port}"
    if parts.username:
        cred = parts.username + (f":{parts.password}" if parts.password else "")
        host = f"{cred}@{host}"
    path = parts.path.rstrip("/")
    return urlunsplit((scheme, host, path, parts.query, ""))


def url_digest(url: str) -> str:
    """Stable 256-bit hex digest of the normalized URL (bundle body file names)."""
    return hashlib.sha256(normalize_url(url).encode("utf-8")).hexdigest()


def host_of(url: str) -> str:
    parts = urlsplit(url)
    return (parts.netloc or "").lower()
