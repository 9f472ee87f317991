from __future__ import annotations

import json
import math

import pytest

from mira.core import load_config
from mira.encode import Encoders
from mira.errors import ConfigError, ProviderError
from mira.pipeline import (
    Pipeline,
    Providers,
    QueryInput,
    add_entries,
    promote_cached,
    query_id,
    read_manifest,
    result_to_dict,
)
from mira.store import VectorIndex
from mira.websearch import iter_cached

from .conftest import QUERY, SESSION


def session_pipeline(session, **overrides):
    cfg = load_config(session / "session.cfg")
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    return Pipeline.from_config(cfg, index=VectorIndex.load(session / "kb.idx"), base_dir=session)


def user_input(session):
    return QueryInput.from_path(QUERY, session / "images" / "user.png")


class Tripwire:
    live = True

    def fetch(self, query, timeout):
        raise AssertionError("online search was called")


class FailingRewriter:
    def rewrite(self, text):
        raise ProviderError("rewriter down")


class BrokenEncoders(Encoders):
    def embed_text(self, text):
        raise ProviderError("encoder down")


def test_golden_session(session):
    res = session_pipeline(session).run(user_input(session))
    assert res.serialized == (SESSION / "expected.rtra").read_text(encoding="utf-8")
    assert res.reward > 0


def test_manifest_reading():
    entries = read_manifest(SESSION / "index.jsonl")
    assert [e.id for e in entries] == ["kb-nsip", "kb-crypto", "kb-meningitis", "2", "3", "4"]
    assert entries[3].image_path.is_absolute() and entries[3].metadata["caption"].startswith("CT of the chest")


def test_manifest_errors(tmp_path):
    bad = tmp_path / "m.jsonl"
    bad.write_text('{"id": "x", "text": "a", "image": "b.png"}\n')
    with pytest.raises(ValueError, match="exactly one"):
        read_manifest(bad)
    bad.write_text("{not json\n")
    with pytest.raises(ValueError, match="invalid JSON"):
        read_manifest(bad)


def test_no_online_uses_no_search(session):
    pipe = session_pipeline(session, online_enabled=False)
    assert pipe.online is None
    pipe.providers.search = Tripwire()
    res = pipe.run(user_input(session))
    assert "offline_only" in res.record.degraded_flags
    assert res.bundle.api_text is None


def test_no_online_override_bypasses_existing_client(session):
    pipe = session_pipeline(session)
    pipe.online.provider = Tripwire()
    res = pipe.run(user_input(session), pipe.cfg.with_overrides(online_enabled=False))
    assert "offline_only" in res.flags


def test_text_only_has_no_images(session):
    res = session_pipeline(session, text_only=True).run(user_input(session))
    assert res.bundle.retrieved_images == () and res.bundle.original_image is None
    assert "mode:text_only" in res.flags
    assert res.record.is_none


def test_vision_only_needs_image(session):
    with pytest.raises(ValueError):
        session_pipeline(session, vision_only=True).run(QueryInput(QUERY))


def test_index_dim_mismatch(session):
    cfg = load_config(session / "session.cfg")
    with pytest.raises(ConfigError):
        Pipeline.from_config(cfg, index=VectorIndex(16), base_dir=session)


def test_encoder_failure_is_provider_error(session):
    pipe = session_pipeline(session)
    pipe.providers.encoders = BrokenEncoders(pipe.providers.encoders.text, pipe.providers.encoders.image)
    with pytest.raises(ProviderError):
        pipe.run(user_input(session))


def test_rewriter_fallback_flag(session):
    pipe = session_pipeline(session, online_enabled=False)
    pipe.providers.rewriter = FailingRewriter()
    res = pipe.run(user_input(session))
    assert "rewrite_fallback" in res.flags and res.rewrite.provider_used == "rule_based"


def test_query_id_and_trace(session):
    pipe = session_pipeline(session)
    inp = user_input(session)
    res = pipe.run(inp)
    assert res.query_id == query_id(pipe.cfg, inp) and len(res.query_id) == 16
    assert pipe.trace_for(res.query_id) == res.trace
    assert abs(math.fsum(res.trace.weights) - 1.0) <= 1e-6
    assert res.trace.component_labels[:2] == ("input_image", "query")
    assert query_id(pipe.cfg.with_overrides(alpha=0.3), inp) != res.query_id


def test_result_dict_is_json(session):
    d = result_to_dict(session_pipeline(session).run(user_input(session)))
    assert json.loads(json.dumps(d)) == d
    assert d["record"]["coverage"]["T1"] >= 1 and d["record"]["coverage"]["I1"] >= 1


def test_online_cache_and_promotion(session):
    pipe = session_pipeline(session)
    pipe.run(user_input(session))
    docs = iter_cached(session / "cache")
    assert len(docs) == 1
    idx = VectorIndex.load(session / "kb.idx")
    added = promote_cached(idx, docs, pipe.providers.encoders)
    assert added[0] == "online:https://example.org/encephalomalacia"
    assert any(a.startswith("online-image:") for a in added)
    assert promote_cached(idx, docs, pipe.providers.encoders) == []


def test_add_entries_rejects_duplicates():
    enc = Encoders.reference(384)
    idx = VectorIndex(384)
    entries = read_manifest(SESSION / "index.jsonl")
    add_entries(idx, entries, enc)
    with pytest.raises(ValueError):
        add_entries(idx, entries[:1], enc)


def test_providers_from_config_endpoints(tmp_path):
    cfg = load_config(SESSION / "session.cfg")
    prov = Providers.from_config(cfg, SESSION)
    assert prov.rewriter is None and prov.judge is None and prov.judge_fn() is None
    with pytest.raises(ConfigError):
        Providers.from_config(cfg.with_overrides(endpoints={"generator": "ftp://x"}), SESSION)
