from __future__ import annotations

import datetime as dt
import json
import time

import httpx
import pytest

from mira.websearch import (
    DuckDuckGoProvider,
    FixtureSearchProvider,
    OnlineClient,
    OnlineResult,
    cache_key,
    iter_cached,
    parse_duckduckgo,
    query_digest,
    search_online,
)

from .conftest import QUERY, SESSION

DAY = dt.date(2026, 1, 5)


def write_fixture(directory, query, results):
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{query_digest(query)}.response"
    path.write_text(json.dumps({"query": query, "results": results}), encoding="utf-8")
    return path


def three_results():
    return [
        {"title": f"t{i}", "paragraph": f"paragraph {i}", "url": f"https://example.org/{i}", "image": None}
        for i in range(3)
    ]


class CountingProvider:
    live = True

    def __init__(self, doc=None, exc=None, delay=0.0):
        self.doc, self.exc, self.delay = doc, exc, delay
        self.calls = 0

    def fetch(self, query, timeout):
        self.calls += 1
        if self.delay:
            time.sleep(self.delay)
        if self.exc:
            raise self.exc
        return self.doc


def test_digest_is_eight_hex():
    d = query_digest(QUERY)
    assert len(d) == 8 and int(d, 16) >= 0
    assert d == "de318230"


def test_online_result_validation():
    now = dt.datetime(2026, 1, 1)
    with pytest.raises(ValueError):
        OnlineResult("t", "p", "", now)
    with pytest.raises(ValueError):
        OnlineResult("t", "  ", "https://x", now)


def test_fixture_truncates_to_max_results(tmp_path):
    write_fixture(tmp_path, "q", three_results())
    client = OnlineClient(FixtureSearchProvider(tmp_path), today=lambda: DAY)
    out = search_online("q", 2, client)
    assert not out.degraded
    assert [r.title for r in out.results] == ["t0", "t1"]
    assert out.results[0].fetched_at.date() == DAY


def test_missing_fixture_is_empty_not_degraded(tmp_path):
    out = OnlineClient(FixtureSearchProvider(tmp_path)).search("nothing here", 3)
    assert out.results == [] and not out.degraded


def test_session_fixture_has_image():
    out = OnlineClient(FixtureSearchProvider(SESSION / "search")).search(QUERY, 5)
    assert len(out.results) == 1
    res = out.results[0]
    assert res.paragraph.startswith("Encephalomalacia")
    assert res.image is not None and res.image.source == "online"
    assert (res.image.width, res.image.height) == (48, 48)


def test_provider_timeout_degrades():
    client = OnlineClient(CountingProvider({"results": []}, delay=0.5), timeout=0.05, min_interval=0)
    t0 = time.monotonic()
    out = client.search("q", 3)
    assert out.degraded and out.reason == "timeout" and out.results == []
    assert time.monotonic() - t0 < 0.4


def test_provider_error_degrades():
    client = OnlineClient(CountingProvider(exc=httpx.ConnectError("down")), min_interval=0)
    out = client.search("q", 3)
    assert out.degraded and "down" in out.reason


def test_max_results_must_be_positive(tmp_path):
    with pytest.raises(ValueError):
        OnlineClient(FixtureSearchProvider(tmp_path)).search("q", 0)


def test_cache_by_query_and_day(tmp_path):
    doc = {"results": three_results()}
    prov = CountingProvider(doc)
    today = [DAY]
    client = OnlineClient(prov, cache_dir=tmp_path, min_interval=0, today=lambda: today[0])
    first = client.search("q", 3)
    again = client.search("q", 3)
    assert prov.calls == 1
    assert [r.url for r in first.results] == [r.url for r in again.results]
    cached = tmp_path / "online" / f"{cache_key('q', DAY)}.response"
    assert cached.exists()
    today[0] = DAY + dt.timedelta(days=1)
    client.search("q", 3)
    assert prov.calls == 2
    docs = iter_cached(tmp_path)
    assert len(docs) == 2 and all(d["query"] == "q" for d in docs)


def test_rate_limit_spaces_live_calls():
    clock = [100.0]
    slept = []

    def sleep(s):
        slept.append(s)
        clock[0] += s

    prov = CountingProvider({"results": []})
    client = OnlineClient(prov, min_interval=1.0, clock=lambda: clock[0], sleep=sleep)
    client.search("a", 1)
    clock[0] += 0.25
    client.search("b", 1)
    assert slept == [pytest.approx(0.75)]


def test_fixture_calls_are_not_throttled(tmp_path):
    slept = []
    client = OnlineClient(FixtureSearchProvider(tmp_path), sleep=slept.append)
    for q in "abc":
        client.search(q, 1)
    assert slept == []


def test_parse_duckduckgo_abstract_and_topics():
    data = {
        "Heading": "Glioma",
        "AbstractText": "A glioma is a tumour.",
        "AbstractURL": "https://en.wikipedia.org/wiki/Glioma",
        "Image": "/i/glioma.png",
        "RelatedTopics": [
            {"Text": "Astrocytoma - a glioma type", "FirstURL": "https://duckduckgo.com/Astrocytoma", "Icon": {"URL": ""}},
            {"Name": "See also", "Topics": [{"Text": "Oligodendroglioma", "FirstURL": "https://duckduckgo.com/O"}]},
            {"Text": "", "FirstURL": "https://duckduckgo.com/empty"},
        ],
    }
    doc = parse_duckduckgo("glioma", data)
    res = doc["results"]
    assert [r["title"] for r in res] == ["Glioma", "Astrocytoma", "Oligodendroglioma"]
    assert res[0]["image"] == {"url": "https://duckduckgo.com/i/glioma.png"}
    assert res[1]["image"] is None


def test_duckduckgo_provider_sends_q_param():
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["q"] = request.url.params["q"]
        return httpx.Response(200, json={"AbstractText": "Text.", "AbstractURL": "https://x", "Heading": "H"})

    prov = DuckDuckGoProvider(client=httpx.Client(transport=httpx.MockTransport(handler)))
    doc = prov.fetch("brain lesion", 5.0)
    assert seen["q"] == "brain lesion"
    assert doc["results"][0]["paragraph"] == "Text."


def test_duckduckgo_http_error_degrades():
    transport = httpx.MockTransport(lambda r: httpx.Response(500))
    prov = DuckDuckGoProvider(client=httpx.Client(transport=transport))
    out = OnlineClient(prov, min_interval=0).search("x", 3)
    assert out.degraded
