"""Text and image encoders.

External encoders sit behind ``POST {endpoint}/embed``. The reference encoder
is a hashed n-gram embedder. Character 3-grams (text) or 64-byte blocks
(images) are hashed to 64 bits. Each hash adds +1 or -1 to one of ``dim``
buckets; the sum is then L2-normalized. It is a pure function of its input.
"""

from __future__ import annotations

import base64
import hashlib
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable
from urllib.parse import unquote, urlparse

import httpx
import numpy as np

from . import _http
from .core import Embedding, ImageRef
from .errors import ContractError, TransportError

TEXT_GRAM = 3
IMAGE_BLOCK = 64


@dataclass(frozen=True)
class EncoderSpec:
    modality: str
    dim: int = 384
    endpoint: str | None = None
    kind: str = "reference"
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.modality not in ("text", "image"):
            raise ValueError(f"encoder modality must be text or image, got {self.modality!r}")
        if self.dim < 1:
            raise ValueError("encoder dim must be positive")
        if self.kind not in ("reference", "external"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "external" and not self.endpoint:
            raise ValueError("external encoders need an endpoint")


@lru_cache(maxsize=1 << 16)
def _hash64(token: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(token, digest_size=8).digest(), "little")


def _accumulate(tokens: Iterable[bytes], dim: int) -> np.ndarray:
    vec = np.zeros(dim, dtype=np.float64)
    for token, count in Counter(tokens).items():
        h = _hash64(token)
        sign = -1.0 if (h >> 63) & 1 else 1.0
        vec[h % dim] += sign * count
    return vec


def _finish(vec: np.ndarray, fallback: bytes, dim: int) -> np.ndarray:
    n = np.linalg.norm(vec)
    if n == 0.0:
        # Every bucket cancelled out (or no tokens): use a single-token vector.
        vec = _accumulate([fallback], dim)
        n = np.linalg.norm(vec)
    return vec / n


def text_grams(text: str) -> list[bytes]:
    t = text.lower()
    if len(t) < TEXT_GRAM:
        return [t.encode("utf-8")]
    return [t[i : i + TEXT_GRAM].encode("utf-8") for i in range(len(t) - TEXT_GRAM + 1)]


def byte_blocks(data: bytes) -> list[bytes]:
    if not data:
        return [b""]
    return [data[i : i + IMAGE_BLOCK] for i in range(0, len(data), IMAGE_BLOCK)]


def reference_text_vector(text: str, dim: int) -> np.ndarray:
    return _finish(_accumulate(text_grams(text), dim), b"\x00text", dim)


def reference_image_vector(data: bytes, dim: int) -> np.ndarray:
    return _finish(_accumulate(byte_blocks(data), dim), b"\x00image", dim)


def _external(enc: EncoderSpec, content: str) -> np.ndarray:
    assert enc.endpoint is not None
    data = _http.post_json(
        _http.join(enc.endpoint, "/embed"),
        {"modality": enc.modality, "content": content},
        timeout=enc.timeout,
    )
    raw = data.get("embedding")
    if not isinstance(raw, list):
        raise ContractError("embedder response lacks an 'embedding' list")
    try:
        vec = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ContractError("embedding contains non-numeric values") from exc
    if vec.shape != (enc.dim,):
        raise ContractError(f"embedder returned dim {vec.size}, expected {enc.dim}")
    n = np.linalg.norm(vec)
    if not np.isfinite(n) or n == 0.0:
        raise ContractError("embedder returned a zero or non-finite vector")
    return vec / n


def embed_text(text: str, enc: EncoderSpec) -> Embedding:
    """Unit-norm text embedding of ``text`` (a query or a text chunk)."""
    if enc.modality != "text":
        raise ContractError("embed_text needs a text encoder")
    if enc.kind == "reference":
        return Embedding("text", reference_text_vector(text, enc.dim))
    return Embedding("text", _external(enc, text))


def embed_image(payload: bytes, enc: EncoderSpec) -> Embedding:
    if enc.modality != "image":
        raise ContractError("embed_image needs an image encoder")
    if enc.kind == "reference":
        return Embedding("image", reference_image_vector(payload, enc.dim))
    return Embedding("image", _external(enc, base64.b64encode(payload).decode("ascii")))


@dataclass(frozen=True)
class Encoders:
    """The text/image encoder pair used by a pipeline."""

    text: EncoderSpec
    image: EncoderSpec

    def __post_init__(self) -> None:
        if self.text.dim != self.image.dim:
            raise ContractError("text and image encoders must share one dimension")

    @classmethod
    def reference(cls, dim: int = 384) -> "Encoders":
        return cls(EncoderSpec("text", dim), EncoderSpec("image", dim))

    @property
    def dim(self) -> int:
        return self.text.dim

    def embed_text(self, text: str) -> Embedding:
        return embed_text(text, self.text)

    def embed_image(self, payload: bytes) -> Embedding:
        return embed_image(payload, self.image)


def load_payload(ref: ImageRef, timeout: float = 10.0) -> bytes:
    """Fetch the bytes behind ``ref.payload_uri`` and check them against the digest."""
    uri = ref.payload_uri
    parsed = urlparse(uri)
    if parsed.scheme in ("http", "https"):
        try:
            resp = httpx.get(uri, timeout=timeout, follow_redirects=True)
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise TransportError(f"cannot fetch image {uri}: {exc}") from exc
        data = resp.content
    else:
        path = Path(unquote(parsed.path)) if parsed.scheme == "file" else Path(uri)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise ValueError(f"unreadable image payload {uri!r}: {exc}") from exc
    if hashlib.sha256(data).hexdigest() != ref.bytes_digest:
        raise ValueError(f"payload digest mismatch for image {ref.id!r}")
    return data
