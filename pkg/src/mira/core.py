"""Domain types shared by every stage, plus configuration loading."""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ConfigError

MODALITIES = ("text", "image", "joint")
IMAGE_SOURCES = ("user", "offline_index", "online")
ENTRY_SOURCES = ("offline", "online")
ENDPOINT_ROLES = (
    "rewriter",
    "text_encoder",
    "image_encoder",
    "generator",
    "rethink",
    "finalize",
    "judge",
    "search",
)

NO_EXTERNAL_CONTEXT = "no external context"


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def text_digest(text: str) -> str:
    return sha256_hex(text.encode("utf-8"))


@dataclass(frozen=True)
class Query:
    """A raw user query. ``word_count`` is the whitespace-token count."""

    text: str

    def __post_init__(self) -> None:
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValueError("query text must be non-empty")

    @property
    def word_count(self) -> int:
        return len(self.text.split())


@dataclass(frozen=True)
class ImageRef:
    id: str
    source: str
    width: int
    height: int
    bytes_digest: str
    payload_uri: str = ""

    def __post_init__(self) -> None:
        if self.source not in IMAGE_SOURCES:
            raise ValueError(f"unknown image source {self.source!r}")
        if len(self.bytes_digest) != 64:
            raise ValueError("bytes_digest must be a 256-bit hex digest")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image width and height must be positive")

    @classmethod
    def from_bytes(
        cls, data: bytes, *, id: str, source: str = "user", payload_uri: str = ""
    ) -> "ImageRef":
        from PIL import Image, UnidentifiedImageError

        try:
            with Image.open(io.BytesIO(data)) as im:
                width, height = im.size
        except (UnidentifiedImageError, OSError) as exc:
            raise ValueError(f"unreadable image payload for {id!r}") from exc
        return cls(id, source, width, height, sha256_hex(data), payload_uri)

    @classmethod
    def from_path(cls, path: str | Path, *, id: str | None = None, source: str = "user") -> "ImageRef":
        path = Path(path)
        return cls.from_bytes(
            path.read_bytes(),
            id=id if id is not None else path.stem,
            source=source,
            payload_uri=path.resolve().as_uri(),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "source": self.source,
            "width": self.width,
            "height": self.height,
            "bytes_digest": self.bytes_digest,
            "payload_uri": self.payload_uri,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ImageRef":
        return cls(
            str(d["id"]),
            str(d["source"]),
            int(d["width"]),
            int(d["height"]),
            str(d["bytes_digest"]),
            str(d.get("payload_uri", "")),
        )


@dataclass(frozen=True, eq=False)
class Embedding:
    """Fixed-length real vector tagged with its modality.

    ``values`` is stored as a read-only float64 array.
    """

    modality: str
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("embedding must be a non-empty vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def is_normalized(self, tol: float = 1e-6) -> bool:
        return abs(self.norm - 1.0) <= tol

    def normalized(self) -> "Embedding":
        n = self.norm
        if n == 0.0:
            raise ValueError("cannot normalize a zero vector")
        return Embedding(self.modality, self.values / n)

    def dot(self, other: "Embedding") -> float:
        if other.dim != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return float(np.dot(self.values, other.values))

    def cosine(self, other: "Embedding") -> float:
        denom = self.norm * other.norm
        if denom == 0.0:
            return 0.0
        return self.dot(other) / denom

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return self.modality == other.modality and np.array_equal(self.values, other.values)

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"Embedding(modality={self.modality!r}, dim={self.dim})"

    def to_dict(self) -> dict[str, Any]:
        return {"modality": self.modality, "values": [float(v) for v in self.values]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Embedding":
        return cls(str(d["modality"]), np.asarray(d["values"], dtype=np.float64))


@dataclass(frozen=True)
class RetrievedEntry:
    id: str
    modality: str
    source: str
    embedding: Embedding
    score: float
    content_text: str | None = None
    image: ImageRef | None = None
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.modality not in ("text", "image"):
            raise ValueError(f"retrieved entry modality must be text or image, got {self.modality!r}")
        if self.source not in ENTRY_SOURCES:
            raise ValueError(f"unknown entry source {self.source!r}")
        if (self.content_text is None) == (self.image is None):
            raise ValueError("exactly one of content_text / image must be set")
        if (self.modality == "text") != (self.content_text is not None):
            raise ValueError("payload does not match modality")
        if not math.isfinite(self.score):
            raise ValueError("score must be finite")
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def content_digest(self) -> str:
        if self.image is not None:
            return self.image.bytes_digest
        assert self.content_text is not None
        return text_digest(self.content_text)

    @property
    def caption(self) -> str:
        return self.metadata.get("caption", "")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "modality": self.modality,
            "source": self.source,
            "embedding": self.embedding.to_dict(),
            "score": self.score,
            "content_text": self.content_text,
            "image": self.image.to_dict() if self.image else None,
            "metadata": dict(sorted(self.metadata.items())),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RetrievedEntry":
        return cls(
            id=str(d["id"]),
            modality=str(d["modality"]),
            source=str(d["source"]),
            embedding=Embedding.from_dict(d["embedding"]),
            score=float(d["score"]),
            content_text=d.get("content_text"),
            image=ImageRef.from_dict(d["image"]) if d.get("image") else None,
            metadata=dict(d.get("metadata") or {}),
        )


def rank_key(entry: RetrievedEntry) -> tuple[float, str]:
    """Sort key: descending score, then ascending id."""
    return (-entry.score, entry.id)


@dataclass(frozen=True)
class RagBundle:
    """The structured multimodal input assembled for generation."""

    original_text: Query
    original_image: ImageRef | None = None
    retrieved_texts: tuple[RetrievedEntry, ...] = ()
    retrieved_images: tuple[RetrievedEntry, ...] = ()
    api_text: RetrievedEntry | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "retrieved_texts", tuple(self.retrieved_texts))
        object.__setattr__(self, "retrieved_images", tuple(self.retrieved_images))

    @property
    def slices(self) -> list[RetrievedEntry]:
        out = list(self.retrieved_texts) + list(self.retrieved_images)
        if self.api_text is not None:
            out.append(self.api_text)
        return out

    @property
    def has_external_context(self) -> bool:
        return bool(self.slices)

    def to_dict(self) -> dict[str, Any]:
        return {
            "original_text": self.original_text.text,
            "original_image": self.original_image.to_dict() if self.original_image else None,
            "retrieved_texts": [e.to_dict() for e in self.retrieved_texts],
            "retrieved_images": [e.to_dict() for e in self.retrieved_images],
            "api_text": self.api_text.to_dict() if self.api_text else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RagBundle":
        return cls(
            original_text=Query(d["original_text"]),
            original_image=ImageRef.from_dict(d["original_image"]) if d.get("original_image") else None,
            retrieved_texts=tuple(RetrievedEntry.from_dict(e) for e in d.get("retrieved_texts", [])),
            retrieved_images=tuple(RetrievedEntry.from_dict(e) for e in d.get("retrieved_images", [])),
            api_text=RetrievedEntry.from_dict(d["api_text"]) if d.get("api_text") else None,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "RagBundle":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class PipelineConfig:
    k_text: int = 3
    k_image: int = 2
    rag_topk: int = 3
    alpha: float = 0.5
    lambda1: float = 0.7
    lambda2: float = 0.3
    relevance_threshold: float = 0.5
    embed_dim: int = 384
    query_rewrite_enabled: bool = True
    online_enabled: bool = True
    offline_enabled: bool = True
    text_only: bool = False
    vision_only: bool = False
    tau: float = 0.07
    siglip_t: float = 1.0
    siglip_b: float = 0.0
    cache_dir: str = "cache"
    endpoints: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "endpoints", dict(self.endpoints))
        for key in ("k_text", "k_image", "rag_topk", "embed_dim"):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{key} must be a positive integer, got {value!r}", key)
        for key, lo, hi in (("alpha", 0.0, 1.0), ("relevance_threshold", -1.0, 1.0)):
            value = getattr(self, key)
            if not (lo <= value <= hi):
                raise ConfigError(f"{key} must lie in [{lo}, {hi}], got {value!r}", key)
        for key in ("lambda1", "lambda2"):
            value = getattr(self, key)
            if not (math.isfinite(value) and value >= 0.0):
                raise ConfigError(f"{key} must be a finite non-negative number, got {value!r}", key)
        if self.lambda1 == 0.0 and self.lambda2 == 0.0:
            raise ConfigError("lambda1 and lambda2 cannot both be zero", "lambda2")
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ConfigError(f"tau must be positive, got {self.tau!r}", "tau")
        for key in ("siglip_t", "siglip_b"):
            if not math.isfinite(getattr(self, key)):
                raise ConfigError(f"{key} must be finite", key)
        if not (self.offline_enabled or self.online_enabled):
            raise ConfigError("at least one of offline_enabled / online_enabled must be true", "online_enabled")
        if self.text_only and self.vision_only:
            raise ConfigError("text_only and vision_only are mutually exclusive", "vision_only")
        for role in self.endpoints:
            if role not in ENDPOINT_ROLES:
                raise ConfigError(f"unknown endpoint role {role!r}", f"endpoints.{role}")

    @property
    def modality_mode(self) -> str:
        if self.text_only:
            return "text_only"
        if self.vision_only:
            return "vision_only"
        return "both"

    def with_overrides(self, **changes: Any) -> "PipelineConfig":
        return replace(self, **changes)


def validate_bundle(bundle: RagBundle, cfg: PipelineConfig) -> list[str]:
    """Return every invariant violation of ``bundle``; an empty list means valid."""
    problems: list[str] = []
    if not bundle.has_external_context:
        problems.append(NO_EXTERNAL_CONTEXT)
    if len(bundle.retrieved_texts) > cfg.k_text:
        problems.append(f"too many retrieved texts: {len(bundle.retrieved_texts)} > k_text={cfg.k_text}")
    if len(bundle.retrieved_images) > cfg.k_image:
        problems.append(f"too many retrieved images: {len(bundle.retrieved_images)} > k_image={cfg.k_image}")
    for slot, entries, expected in (
        ("retrieved_texts", bundle.retrieved_texts, "text"),
        ("retrieved_images", bundle.retrieved_images, "image"),
    ):
        for i, entry in enumerate(entries):
            if entry.modality != expected:
                problems.append(f"modality mismatch: {slot}[{i}] is {entry.modality}")
            if not (-1.0 <= entry.score <= 1.0):
                problems.append(f"score out of range: {slot}[{i}]")
        keys = [rank_key(e) for e in entries]
        if keys != sorted(keys):
            problems.append(f"ordering: {slot} not sorted by descending score then id")
    if bundle.api_text is not None and bundle.api_text.modality != "text":
        problems.append("modality mismatch: api_text is image")
    return problems


_CONFIG_FIELDS = {f.name: f for f in fields(PipelineConfig) if f.name != "endpoints"}
_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _coerce(key: str, raw: str, default: Any) -> Any:
    if isinstance(default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}", key)
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}", key) from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}", key) from None
    return raw


def parse_config(text: str) -> PipelineConfig:
    values: dict[str, Any] = {}
    endpoints: dict[str, str] = {}
    defaults = PipelineConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key.startswith("endpoints."):
            role = key[len("endpoints."):]
            if role not in ENDPOINT_ROLES:
                raise ConfigError(f"line {lineno}: unknown endpoint role {role!r}", key)
            endpoints[role] = raw
        elif key in _CONFIG_FIELDS:
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}", key)
            values[key] = _coerce(key, raw, getattr(defaults, key))
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}", key)
    if "rag_topk" in values and "k_text" not in values:
        # rag_topk is the older name for the text-chunk count.
        values["k_text"] = values["rag_topk"]
    return PipelineConfig(**values, endpoints=endpoints)


def load_config(path: str | Path) -> PipelineConfig:
    """Read a flat ``key = value`` config file; missing keys keep their defaults."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for name in _CONFIG_FIELDS:
        value = getattr(cfg, name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name} = {value}")
    for role in sorted(cfg.endpoints):
        lines.append(f"endpoints.{role} = {cfg.endpoints[role]}")
    return "\n".join(lines) + "\n"


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")


def unit(values: Sequence[float] | np.ndarray, modality: str = "joint") -> Embedding:
    """Build a normalized embedding from raw values."""
    return Embedding(modality, np.asarray(values, dtype=np.float64)).normalized()
