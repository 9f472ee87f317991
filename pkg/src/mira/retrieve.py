"""Assemble the structured RAG bundle from the offline index and online search."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable

from .core import (
    NO_EXTERNAL_CONTEXT,
    Embedding,
    ImageRef,
    PipelineConfig,
    Query,
    RagBundle,
    RetrievedEntry,
    rank_key,
)
from .encode import Encoders, load_payload
from .errors import MiraError
from .store import VectorIndex
from .websearch import OnlineClient, SearchOutcome

log = logging.getLogger(__name__)

MODES = ("both", "text_only", "vision_only")


@dataclass(frozen=True)
class RetrievalPlan:
    k_text: int = 3
    k_image: int = 2
    use_offline: bool = True
    use_online: bool = True
    modality_mode: str = "both"
    overflow: int = 8
    online_max_results: int = 5

    def __post_init__(self) -> None:
        if self.modality_mode not in MODES:
            raise ValueError(f"unknown modality mode {self.modality_mode!r}")
        if self.k_text < 1 or self.k_image < 1:
            raise ValueError("k_text and k_image must be positive")
        if not (self.use_offline or self.use_online):
            raise ValueError("at least one retrieval source must be enabled")

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "RetrievalPlan":
        return cls(
            k_text=cfg.k_text,
            k_image=cfg.k_image,
            use_offline=cfg.offline_enabled,
            use_online=cfg.online_enabled,
            modality_mode=cfg.modality_mode,
        )


@dataclass(frozen=True)
class RetrievalResult:
    bundle: RagBundle
    overflow: tuple[RetrievedEntry, ...]
    flags: tuple[str, ...]

    @property
    def pool(self) -> list[RetrievedEntry]:
        """Every candidate: bundle slots first, then overflow."""
        return self.bundle.slices + list(self.overflow)


def dedupe(candidates: Iterable[RetrievedEntry]) -> list[RetrievedEntry]:
    """Keep one entry per content digest, the higher-scored one (ties: lower id)."""
    best: dict[str, RetrievedEntry] = {}
    for entry in candidates:
        key = entry.content_digest
        cur = best.get(key)
        if cur is None or rank_key(entry) < rank_key(cur):
            best[key] = entry
    return sorted(best.values(), key=rank_key)


def _clip(x: float) -> float:
    return max(-1.0, min(1.0, x))


def _query_vectors(
    e_text: Embedding | None, e_image: Embedding | None, mode: str
) -> tuple[Embedding, Embedding | None]:
    """Pick the query vector used to score text candidates and image candidates."""
    if mode == "text_only":
        if e_text is None:
            raise ValueError("text_only retrieval needs a text query embedding")
        return e_text, None
    if mode == "vision_only":
        if e_image is None:
            raise ValueError("vision_only retrieval needs an image query embedding")
        return e_image, e_image
    if e_text is None and e_image is None:
        raise ValueError("retrieve needs at least one query embedding")
    # Cross-modal fallback: whichever embedding exists scores both kinds.
    text_q = e_text if e_text is not None else e_image
    image_q = e_image if e_image is not None else e_text
    assert text_q is not None
    return text_q, image_q


def _online_entries(
    outcome: SearchOutcome,
    encoders: Encoders,
    text_q: Embedding,
    image_q: Embedding | None,
    flags: list[str],
) -> list[RetrievedEntry]:
    entries = []
    for res in outcome.results:
        if res.paragraph:
            emb = encoders.embed_text(res.paragraph)
            entries.append(
                RetrievedEntry(
                    id=f"online:{res.url}",
                    modality="text",
                    source="online",
                    embedding=emb,
                    score=_clip(text_q.cosine(emb)),
                    content_text=res.paragraph,
                    metadata={"title": res.title, "url": res.url},
                )
            )
        if res.image is not None and image_q is not None:
            try:
                emb = encoders.embed_image(load_payload(res.image))
            except (MiraError, ValueError) as exc:
                log.warning("skipping online image %s: %s", res.image.id, exc)
                flags.append("online_image_unavailable")
                continue
            entries.append(
                RetrievedEntry(
                    id=f"online-image:{res.image.id}",
                    modality="image",
                    source="online",
                    embedding=emb,
                    score=_clip(image_q.cosine(emb)),
                    image=res.image,
                    metadata={"caption": res.title, "url": res.url},
                )
            )
    return entries


def retrieve(
    e_text: Embedding | None,
    e_image: Embedding | None,
    idx: VectorIndex | None,
    online: OnlineClient | None,
    plan: RetrievalPlan,
    *,
    query: Query,
    encoders: Encoders,
    search_text: str | None = None,
    original_image: ImageRef | None = None,
) -> RetrievalResult:
    """Search offline and online sources and fill the bundle slots.

    Text candidates are ranked against the text query, image candidates
    against the image query. Online images are kept in the overflow pool
    only; the best online paragraph becomes ``api_text``.
    """
    text_q, image_q = _query_vectors(e_text, e_image, plan.modality_mode)
    if idx is not None and idx.dim != text_q.dim:
        raise ValueError(f"index dim {idx.dim} does not match query dim {text_q.dim}")
    flags: list[str] = []
    want_images = plan.modality_mode != "text_only"

    def offline() -> tuple[list[RetrievedEntry], list[RetrievedEntry]]:
        if not plan.use_offline or idx is None:
            return [], []
        texts = idx.search_entries(text_q, plan.k_text + plan.overflow, "text")
        images = []
        if want_images and image_q is not None:
            images = idx.search_entries(image_q, plan.k_image + plan.overflow, "image")
        return texts, images

    def online_search() -> SearchOutcome | None:
        if not plan.use_online or online is None:
            return None
        return online.search(search_text or query.text, plan.online_max_results)

    with ThreadPoolExecutor(max_workers=2) as pool:
        off_future = pool.submit(offline)
        on_future = pool.submit(online_search)
        off_texts, off_images = off_future.result()
        outcome = on_future.result()

    if not plan.use_online:
        flags.append("offline_only")
    elif online is None:
        flags.append("online_unavailable")
    if not plan.use_offline:
        flags.append("online_only")
    elif idx is None:
        flags.append("offline_unavailable")
    if plan.modality_mode != "both":
        flags.append(f"mode:{plan.modality_mode}")

    on_entries: list[RetrievedEntry] = []
    if outcome is not None:
        if outcome.degraded:
            flags.append("online_degraded")
        on_entries = _online_entries(outcome, encoders, text_q, image_q if want_images else None, flags)

    texts = dedupe(off_texts + [e for e in on_entries if e.modality == "text"])
    api_text = next((e for e in texts if e.source == "online"), None)
    rest_texts = [e for e in texts if e is not api_text]
    images = dedupe(off_images + [e for e in on_entries if e.modality == "image"]) if want_images else []
    offline_images = [e for e in images if e.source == "offline"]

    bundle_texts = rest_texts[: plan.k_text]
    bundle_images = offline_images[: plan.k_image]
    chosen = {id(e) for e in bundle_texts + bundle_images}
    overflow = sorted(
        (e for e in rest_texts + images if id(e) not in chosen),
        key=rank_key,
    )
    bundle = RagBundle(
        original_text=query,
        original_image=original_image,
        retrieved_texts=tuple(bundle_texts),
        retrieved_images=tuple(bundle_images),
        api_text=api_text,
    )
    if not bundle.has_external_context:
        flags.append(NO_EXTERNAL_CONTEXT)
    return RetrievalResult(bundle, tuple(overflow), tuple(dict.fromkeys(flags)))
