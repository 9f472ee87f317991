from __future__ import annotations

import base64
import hashlib
import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mira import _http
from mira.core import ImageRef
from mira.encode import EncoderSpec, Encoders, embed_image, embed_text, load_payload
from mira.errors import ContractError, TransportError

from .conftest import SESSION

TEXT = EncoderSpec("text")
IMAGE = EncoderSpec("image")


def oracle_vector(tokens: list[bytes], dim: int) -> np.ndarray:
    """Independent restatement of the hashed bucket embedder."""
    v = [0.0] * dim
    for tok in tokens:
        h = int.from_bytes(hashlib.blake2b(tok, digest_size=8).digest(), "little")
        v[h % dim] += -1.0 if h >> 63 else 1.0
    n = sum(x * x for x in v) ** 0.5
    return np.array(v) / n


def test_same_string_twice_is_identical():
    a, b = embed_text("pleural effusion", TEXT), embed_text("pleural effusion", TEXT)
    assert a == b
    assert a.cosine(b) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.text(min_size=0, max_size=60))
def test_text_embedding_is_unit_norm(text):
    e = embed_text(text, TEXT)
    assert e.dim == 384
    assert abs(e.norm - 1.0) <= 1e-6


def test_punctuation_variant_is_close():
    assert embed_text("pneumonia", TEXT).cosine(embed_text("pneumonia.", TEXT)) >= 0.9


def test_matches_independent_oracle():
    text = "CT scan of the chest"
    t = text.lower()
    grams = [t[i : i + 3].encode() for i in range(len(t) - 2)]
    assert np.allclose(embed_text(text, TEXT).values, oracle_vector(grams, 384), atol=1e-12)


def test_case_insensitive():
    assert embed_text("Lesion", TEXT) == embed_text("lesion", TEXT)


def test_image_embeddings():
    a = (SESSION / "images" / "2.png").read_bytes()
    b = (SESSION / "images" / "3.png").read_bytes()
    ea, eb = embed_image(a, IMAGE), embed_image(b, IMAGE)
    assert ea == embed_image(a, IMAGE)
    assert abs(ea.norm - 1.0) <= 1e-6
    assert ea.cosine(eb) < 1.0
    blocks = [a[i : i + 64] for i in range(0, len(a), 64)]
    assert np.allclose(ea.values, oracle_vector(blocks, 384), atol=1e-12)


def test_user_image_is_near_image_four():
    user = embed_image((SESSION / "images" / "user.png").read_bytes(), IMAGE)
    four = embed_image((SESSION / "images" / "4.png").read_bytes(), IMAGE)
    two = embed_image((SESSION / "images" / "2.png").read_bytes(), IMAGE)
    assert user.cosine(four) > 0.9 > user.cosine(two)


def test_wrong_modality_spec_rejected():
    with pytest.raises(ContractError):
        embed_text("x", IMAGE)
    with pytest.raises(ContractError):
        embed_image(b"x", TEXT)


def test_encoders_need_shared_dim():
    with pytest.raises(ContractError):
        Encoders(EncoderSpec("text", 8), EncoderSpec("image", 16))


def test_external_kind_needs_endpoint():
    with pytest.raises(ValueError):
        EncoderSpec("text", kind="external")


def _mock(monkeypatch, handler):
    transport = httpx.MockTransport(handler)

    def post(url, **kw):
        with httpx.Client(transport=transport) as c:
            return c.post(url, **kw)

    monkeypatch.setattr(_http.httpx, "post", post)
    monkeypatch.setattr(_http.time, "sleep", lambda s: None)


def test_external_embedder_contract(monkeypatch):
    seen = []

    def handler(req):
        seen.append((req.url.path, json.loads(req.content)))
        return httpx.Response(200, json={"embedding": [3.0, 4.0]})

    _mock(monkeypatch, handler)
    spec = EncoderSpec("image", 2, endpoint="http://emb.local", kind="external")
    e = embed_image(b"\x01\x02", spec)
    assert np.allclose(e.values, [0.6, 0.8])
    assert seen == [("/embed", {"modality": "image", "content": base64.b64encode(b"\x01\x02").decode()})]


def test_external_dim_mismatch_is_contract_error(monkeypatch):
    _mock(monkeypatch, lambda req: httpx.Response(200, json={"embedding": [1.0, 0.0, 0.0]}))
    with pytest.raises(ContractError):
        embed_text("x", EncoderSpec("text", 2, endpoint="http://emb.local", kind="external"))


def test_external_unreachable_is_transport_error(monkeypatch):
    def handler(req):
        raise httpx.ConnectError("refused", request=req)

    _mock(monkeypatch, handler)
    with pytest.raises(TransportError):
        embed_text("x", EncoderSpec("text", 2, endpoint="http://emb.local", kind="external"))


def test_server_error_retried_once(monkeypatch):
    calls = []

    def handler(req):
        calls.append(1)
        if len(calls) == 1:
            return httpx.Response(503)
        return httpx.Response(200, json={"embedding": [1.0, 0.0]})

    _mock(monkeypatch, handler)
    embed_text("x", EncoderSpec("text", 2, endpoint="http://emb.local", kind="external"))
    assert len(calls) == 2


def test_load_payload_checks_digest(tmp_path):
    ref = ImageRef.from_path(SESSION / "images" / "2.png")
    assert load_payload(ref) == (SESSION / "images" / "2.png").read_bytes()
    bad = ImageRef(ref.id, ref.source, 1, 1, "0" * 64, ref.payload_uri)
    with pytest.raises(ValueError):
        load_payload(bad)
