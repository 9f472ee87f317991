"""Online retrieval: a web search client with a day-keyed cache and rate limiting.

Providers return a response document of the form::

    {"query": str, "results": [{"title": str, "paragraph": str, "url": str,
                                "image": {"url": str} | {"path": str} | null}]}

The same document is what the cache stores under
``<cache_dir>/online/<digest>.response`` and what fixture files contain.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

import httpx

from .core import ImageRef

log = logging.getLogger(__name__)

DDG_URL = "https://api.duckduckgo.com/"


def query_digest(query: str) -> str:
    """8-hex digest used to name fixture files."""
    return hashlib.sha256(query.encode("utf-8")).hexdigest()[:8]


def cache_key(query: str, day: dt.date) -> str:
    return hashlib.sha256(f"{day.isoformat()}\n{query}".encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class OnlineResult:
    title: str
    paragraph: str
    url: str
    fetched_at: dt.datetime
    image: ImageRef | None = None

    def __post_init__(self) -> None:
        if not self.url:
            raise ValueError("online result needs a url")
        if not self.paragraph.strip() and self.image is None:
            raise ValueError("online result needs a paragraph or an image")


@dataclass(frozen=True)
class SearchOutcome:
    results: list[OnlineResult] = field(default_factory=list)
    degraded: bool = False
    reason: str = ""


class SearchProvider(Protocol):
    live: bool

    def fetch(self, query: str, timeout: float) -> dict[str, Any]: ...


class FixtureSearchProvider:
    """Reads ``<dir>/<8-hex digest of query>.response``; a missing file means no results."""

    live = False

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def path_for(self, query: str) -> Path:
        return self.directory / f"{query_digest(query)}.response"

    def fetch(self, query: str, timeout: float) -> dict[str, Any]:
        path = self.path_for(query)
        if not path.exists():
            return {"query": query, "results": []}
        doc = json.loads(path.read_text(encoding="utf-8"))
        doc.setdefault("base_dir", str(self.directory))
        return doc


class DuckDuckGoProvider:
    """Instant-answer API: abstract first, then related topics."""

    live = True

    def __init__(self, url: str = DDG_URL, client: httpx.Client | None = None):
        self.url = url
        self.client = client

    def fetch(self, query: str, timeout: float) -> dict[str, Any]:
        params = {"q": query, "format": "json", "no_html": "1", "skip_disambig": "1"}
        get = self.client.get if self.client is not None else httpx.get
        resp = get(self.url, params=params, timeout=timeout)
        resp.raise_for_status()
        return parse_duckduckgo(query, resp.json())


def _ddg_image(path: str) -> dict[str, str] | None:
    if not path:
        return None
    if path.startswith("/"):
        path = "https://duckduckgo.com" + path
    return {"url": path}


def parse_duckduckgo(query: str, data: dict[str, Any]) -> dict[str, Any]:
    results = []
    abstract = (data.get("AbstractText") or "").strip()
    if abstract:
        results.append(
            {
                "title": data.get("Heading") or query,
                "paragraph": abstract,
                "url": data.get("AbstractURL") or DDG_URL,
                "image": _ddg_image(data.get("Image") or ""),
            }
        )
    topics = list(data.get("RelatedTopics") or [])
    while topics:
        topic = topics.pop(0)
        if "Topics" in topic:  # grouped sub-topics
            topics[:0] = topic["Topics"]
            continue
        text = (topic.get("Text") or "").strip()
        if not text:
            continue
        results.append(
            {
                "title": text.split(" - ")[0],
                "paragraph": text,
                "url": topic.get("FirstURL") or DDG_URL,
                "image": _ddg_image((topic.get("Icon") or {}).get("URL") or ""),
            }
        )
    return {"query": query, "results": results}


def _image_from_spec(spec: dict[str, Any] | None, base_dir: str | None, rid: str, timeout: float) -> ImageRef | None:
    if not spec:
        return None
    try:
        if "path" in spec:
            path = Path(spec["path"])
            if not path.is_absolute() and base_dir:
                path = Path(base_dir) / path
            return ImageRef.from_path(path, id=rid, source="online")
        url = spec["url"]
        resp = httpx.get(url, timeout=timeout, follow_redirects=True)
        resp.raise_for_status()
        return ImageRef.from_bytes(resp.content, id=rid, source="online", payload_uri=url)
    except (OSError, ValueError, KeyError, httpx.HTTPError) as exc:
        log.warning("dropping online image %s: %s", rid, exc)
        return None


def parse_response(doc: dict[str, Any], fetched_at: dt.datetime, timeout: float = 10.0) -> list[OnlineResult]:
    out = []
    base_dir = doc.get("base_dir")
    for i, item in enumerate(doc.get("results") or []):
        url = item.get("url") or ""
        paragraph = (item.get("paragraph") or "").strip()
        if not url:
            continue
        rid = "online-" + hashlib.sha256(f"{url}\n{i}".encode("utf-8")).hexdigest()[:12]
        image = _image_from_spec(item.get("image"), base_dir, rid + "-img", timeout)
        if not paragraph and image is None:
            continue
        out.append(OnlineResult(item.get("title") or "", paragraph, url, fetched_at, image))
    return out


class OnlineClient:
    """Wraps a provider with a day-keyed cache and a courtesy rate limit.

    Every call is bounded by ``timeout``. Never raises: failures come back
    as a degraded, empty outcome.
    """

    def __init__(
        self,
        provider: SearchProvider,
        *,
        cache_dir: str | Path | None = None,
        timeout: float = 10.0,
        min_interval: float = 1.0,
        today: Callable[[], dt.date] = dt.date.today,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.provider = provider
        self.cache_dir = Path(cache_dir) / "online" if cache_dir is not None else None
        self.timeout = timeout
        self.min_interval = min_interval
        self.today = today
        self.clock = clock
        self.sleep = sleep
        self._last_call: float | None = None
        self._rate_lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=4, thread_name_prefix="websearch")
        self.calls = 0

    def _cache_path(self, query: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{cache_key(query, self.today())}.response"

    def _throttle(self) -> None:
        with self._rate_lock:
            now = self.clock()
            if self._last_call is not None:
                wait = self.min_interval - (now - self._last_call)
                if wait > 0:
                    self.sleep(wait)
                    now = self.clock()
            self._last_call = now

    def _fetch(self, query: str) -> dict[str, Any]:
        self.calls += 1
        if self.provider.live:
            self._throttle()
        future = self._pool.submit(self.provider.fetch, query, self.timeout)
        return future.result(timeout=self.timeout)

    def search(self, query: str, max_results: int) -> SearchOutcome:
        if max_results < 1:
            raise ValueError("max_results must be positive")
        path = self._cache_path(query)
        doc: dict[str, Any] | None = None
        if path is not None and path.exists():
            try:
                doc = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, ValueError):
                doc = None
        if doc is None:
            try:
                doc = self._fetch(query)
            except FutureTimeout:
                log.warning("online search timed out after %.1fs", self.timeout)
                return SearchOutcome([], True, "timeout")
            except Exception as exc:  # provider faults of any kind degrade, never propagate
                log.warning("online search failed: %s", exc)
                return SearchOutcome([], True, f"provider error: {exc}")
            doc = dict(doc)
            doc["query"] = query
            if path is not None and doc.get("results"):
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(json.dumps(doc, ensure_ascii=False, indent=1), encoding="utf-8")
        fetched = dt.datetime.combine(self.today(), dt.time(), tzinfo=dt.timezone.utc)
        results = parse_response(doc, fetched, self.timeout)
        return SearchOutcome(results[:max_results], False, "")


def search_online(q_text: str, max_results: int, client: OnlineClient) -> SearchOutcome:
    return client.search(q_text, max_results)


def iter_cached(cache_dir: str | Path) -> list[dict[str, Any]]:
    """All cached response documents, sorted by file name."""
    root = Path(cache_dir) / "online"
    if not root.is_dir():
        return []
    docs = []
    for path in sorted(root.glob("*.response")):
        try:
            docs.append(json.loads(path.read_text(encoding="utf-8")))
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable cache file %s: %s", path, exc)
    return docs
