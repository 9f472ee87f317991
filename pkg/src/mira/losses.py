"""Training objectives as plain numeric functions (natural log throughout)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ZeroProbabilityWarning(RuntimeWarning):
    """A target token had probability zero; the loss is +inf."""


@dataclass(frozen=True, eq=False)
class TokenDistribution:
    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("token distribution must be a non-empty vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def vocab_size(self) -> int:
        return int(self.probs.size)


def _as_dists(dists: Sequence[TokenDistribution | Sequence[float]]) -> list[TokenDistribution]:
    return [d if isinstance(d, TokenDistribution) else TokenDistribution(np.asarray(d)) for d in dists]


def cross_entropy(targets: Sequence[int], dists: Sequence[TokenDistribution | Sequence[float]]) -> float:
    """Summed negative log-likelihood of ``targets`` under per-step distributions."""
    dists = _as_dists(dists)
    if len(targets) != len(dists):
        raise ValueError(f"{len(targets)} targets but {len(dists)} distributions")
    total = 0.0
    for t, (tok, d) in enumerate(zip(targets, dists)):
        if not 0 <= tok < d.vocab_size:
            raise ValueError(f"target id {tok} at step {t} outside vocab of size {d.vocab_size}")
        p = d.probs[tok]
        if p == 0.0:
            warnings.warn(f"target {tok} at step {t} has probability 0", ZeroProbabilityWarning, stacklevel=2)
            return math.inf
        total -= math.log(p)
    # -log(1.0) is -0.0; report a clean zero.
    return total + 0.0


def autoregressive_nll(
    targets: Sequence[int],
    dists: Sequence[TokenDistribution | Sequence[float]],
    visual_context_len: int = 0,
) -> float:
    """Mean per-token NLL over the target tokens.

    ``visual_context_len`` is the number of visual embedding positions the
    distributions were conditioned on; it does not enter the value.
    """
    if visual_context_len < 0:
        raise ValueError("visual_context_len must be non-negative")
    if len(targets) == 0:
        raise ValueError("need at least one target token")
    return cross_entropy(targets, dists) / len(targets)


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def clip_contrastive(s: Sequence[Sequence[float]] | np.ndarray, tau: float = 0.07) -> float:
    """Symmetric InfoNCE over an N x N image-text similarity matrix."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] == 0:
        raise ValueError(f"similarity matrix must be square and non-empty, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("similarity matrix must be finite")
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = s.shape[0]
    logits = s / tau
    diag = np.diag(logits)
    row_terms = _logsumexp(logits, axis=1) - diag
    col_terms = _logsumexp(logits, axis=0) - diag
    return float((row_terms.sum() + col_terms.sum()) / (2 * n))


def siglip_loss(
    dots: Sequence[Sequence[float]] | np.ndarray,
    labels: Sequence[Sequence[float]] | np.ndarray,
    t: float = 1.0,
    b: float = 0.0,
) -> float:
    """Pairwise sigmoid loss.

    Evaluates ``-(1/B) sum_ij log(1 / (1 + exp(z_ij * (-t * dots_ij + b))))``
    with ``z = +1`` for matching pairs and ``-1`` otherwise.
    """
    x = np.asarray(dots, dtype=np.float64)
    z = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1] or x.shape[0] == 0:
        raise ValueError(f"dot matrix must be square and non-empty, got shape {x.shape}")
    if z.shape != x.shape:
        raise ValueError(f"label shape {z.shape} does not match dot shape {x.shape}")
    if not np.all(np.isin(z, (-1.0, 1.0))):
        raise ValueError("labels must be +1 or -1")
    # -log(1/(1+e^u)) = log(1+e^u), computed stably.
    u = z * (-t * x + b)
    return float(np.logaddexp(0.0, u).sum() / x.shape[0])
