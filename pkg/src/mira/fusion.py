"""Attention-based modality fusion plus argmax knowledge selection."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Embedding, RagBundle, RetrievedEntry

INPUT_IMAGE = "input_image"
QUERY = "query"


@dataclass(frozen=True)
class AttentionTrace:
    component_labels: tuple[str, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "component_labels", tuple(self.component_labels))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.component_labels) != len(self.weights):
            raise ValueError("labels and weights differ in length")
        if any(w < 0 or not math.isfinite(w) for w in self.weights):
            raise ValueError("attention weights must be finite and non-negative")
        if self.weights and abs(math.fsum(self.weights) - 1.0) > 1e-6:
            raise ValueError("attention weights must sum to 1")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "weight"])
        for label, w in zip(self.component_labels, self.weights):
            writer.writerow([label, repr(w)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AttentionTrace":
        rows = list(csv.reader(io.StringIO(text)))
        if rows and rows[0] == ["label", "weight"]:
            rows = rows[1:]
        return cls(tuple(r[0] for r in rows), tuple(float(r[1]) for r in rows))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def to_dict(self) -> dict[str, list]:
        return {"labels": list(self.component_labels), "weights": list(self.weights)}


@dataclass(frozen=True)
class FusedEmbedding:
    values: Embedding
    alpha_used: float
    trace: AttentionTrace | None = None


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def attend(query: Embedding, items: Sequence[Embedding]) -> tuple[Embedding, np.ndarray]:
    """Scaled dot-product attention of ``query`` over ``items``.

    Returns the unit-normalized weighted sum of the items and the softmax
    weights over ``query . item / sqrt(dim)``.
    """
    if not items:
        raise ValueError("attend needs at least one item")
    dim = query.dim
    if any(it.dim != dim for it in items):
        raise ValueError("all embeddings must share one dimension")
    mat = np.stack([it.values for it in items])
    weights = _softmax(mat @ query.values / math.sqrt(dim))
    pooled = weights @ mat
    n = np.linalg.norm(pooled)
    if n == 0.0:
        # Items cancel exactly; fall back to the heaviest item's direction.
        pooled = mat[int(np.argmax(weights))]
        n = np.linalg.norm(pooled)
    return Embedding("joint", pooled / n), weights


def alpha_fuse(att_image: Embedding, att_text: Embedding, alpha: float) -> FusedEmbedding:
    """``normalize(alpha * image + (1 - alpha) * text)``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha!r}")
    if att_image.dim != att_text.dim:
        raise ValueError("image and text embeddings differ in dimension")
    mixed = alpha * att_image.values + (1.0 - alpha) * att_text.values
    n = np.linalg.norm(mixed)
    if n == 0.0:
        raise ValueError("fused vector is zero (opposite inputs at this alpha)")
    return FusedEmbedding(Embedding("joint", mixed / n), alpha)


def select_knowledge(
    f_v: Embedding | None, f_t: Embedding | None, candidates: Sequence[RetrievedEntry]
) -> RetrievedEntry:
    """The candidate maximizing ``<f_v + f_t, f(d)>``; ties go to the smaller id."""
    if not candidates:
        raise ValueError("select_knowledge needs at least one candidate")
    present = [e for e in (f_v, f_t) if e is not None]
    if not present:
        raise ValueError("select_knowledge needs at least one query embedding")
    probe = np.sum([e.values for e in present], axis=0)
    best: RetrievedEntry | None = None
    best_score = -math.inf
    for cand in candidates:
        if cand.embedding.dim != probe.shape[0]:
            raise ValueError("candidate dimension does not match the query")
        score = float(np.dot(probe, cand.embedding.values))
        if score > best_score or (score == best_score and best is not None and cand.id < best.id):
            best, best_score = cand, score
    assert best is not None
    return best


def build_trace(labels: Sequence[str], raw_weights: Sequence[float]) -> AttentionTrace:
    """Normalize raw per-component weights to sum to one."""
    if len(labels) != len(raw_weights):
        raise ValueError(f"{len(labels)} components but {len(raw_weights)} weights")
    w = np.asarray(raw_weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("trace needs at least one component")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("raw weights must be finite and non-negative")
    total = w.sum()
    if total == 0.0:
        raise ValueError("raw weights sum to zero")
    return AttentionTrace(tuple(labels), tuple((w / total).tolist()))


def slice_labels(bundle: RagBundle) -> list[str]:
    """Labels for the bundle slots in bundle order: T1.., I1.., A1."""
    labels = [f"T{i}" for i in range(1, len(bundle.retrieved_texts) + 1)]
    labels += [f"I{i}" for i in range(1, len(bundle.retrieved_images) + 1)]
    if bundle.api_text is not None:
        labels.append("A1")
    return labels


def fuse_bundle(
    e_text: Embedding | None,
    e_image: Embedding | None,
    bundle: RagBundle,
    alpha: float,
) -> FusedEmbedding:
    """Fuse query and retrieved evidence into one joint embedding plus its trace.

    Each modality side is attention-pooled against the normalized sum of the
    query embeddings before the two sides are mixed with ``alpha``. The trace
    records the fused vector's attention over the input components.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha!r}")
    present = [e for e in (e_text, e_image) if e is not None]
    if not present:
        raise ValueError("fusion needs at least one query embedding")
    prior_vec = np.sum([e.values for e in present], axis=0)
    if np.linalg.norm(prior_vec) == 0.0:
        prior_vec = present[0].values
    prior = Embedding("joint", prior_vec / np.linalg.norm(prior_vec))

    image_side = ([e_image] if e_image is not None else []) + [e.embedding for e in bundle.retrieved_images]
    text_side = ([e_text] if e_text is not None else []) + [e.embedding for e in bundle.retrieved_texts]
    if bundle.api_text is not None:
        text_side.append(bundle.api_text.embedding)

    if image_side and text_side:
        att_image, att_text = attend(prior, image_side)[0], attend(prior, text_side)[0]
        try:
            fused = alpha_fuse(att_image, att_text, alpha)
        except ValueError:
            # The two pooled sides cancel exactly; keep the prior direction.
            fused = FusedEmbedding(prior, alpha)
    elif image_side:
        fused = alpha_fuse(attend(prior, image_side)[0], attend(prior, image_side)[0], 1.0)
    else:
        fused = alpha_fuse(attend(prior, text_side)[0], attend(prior, text_side)[0], 0.0)

    labels: list[str] = []
    items: list[Embedding] = []
    if e_image is not None:
        labels.append(INPUT_IMAGE)
        items.append(e_image)
    if e_text is not None:
        labels.append(QUERY)
        items.append(e_text)
    labels += slice_labels(bundle)
    items += [e.embedding for e in bundle.slices]
    _, weights = attend(fused.values, items)
    return FusedEmbedding(fused.values, fused.alpha_used, build_trace(labels, weights))
