"""Reward scoring and a REINFORCE estimator over a small softmax policy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from ..errors import ContractError
from .stages import content_words, sentences

NEGATIONS = frozenset({"not", "no", "never", "without", "cannot", "neither", "nor", "none"})


@dataclass(frozen=True)
class RewardWeights:
    lambda1: float = 0.7
    lambda2: float = 0.3

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("reward weights must be non-negative")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("reward weights cannot both be zero")


Scorer = Callable[[Sequence[str], str], float]


class LexicalFactualScorer:
    """Fraction of answer sentences sharing a content word with the evidence."""

    def __init__(self, evidence_texts: Sequence[str]):
        self.vocab: set[str] = set()
        for text in evidence_texts:
            self.vocab |= content_words(text)

    def __call__(self, z: Sequence[str], y: str) -> float:
        sents = sentences(y)
        if not sents:
            return 0.0
        grounded = sum(1 for s in sents if content_words(s) & self.vocab)
        return grounded / len(sents)


def _negated(text: str) -> bool:
    words = set(text.lower().replace("n't", " not").split())
    return bool(words & NEGATIONS)


class NegationCoherenceScorer:
    """``1 - contradicted / points``.

    A critique point counts as contradicted when some answer sentence shares
    at least ``min_overlap`` content words with it but has the opposite
    negation polarity.
    """

    def __init__(self, min_overlap: int = 2):
        self.min_overlap = min_overlap

    def __call__(self, z: Sequence[str], y: str) -> float:
        if not z:
            return 1.0
        answer = [(content_words(s), _negated(s)) for s in sentences(y)]
        contradicted = 0
        for point in z:
            words, neg = content_words(point), _negated(point)
            if any(len(words & aw) >= self.min_overlap and an != neg for aw, an in answer):
                contradicted += 1
        return 1.0 - contradicted / len(z)


def reward(
    z: Sequence[str],
    y: str,
    weights: RewardWeights,
    factual_scorer: Scorer,
    coherence_scorer: Scorer,
) -> float:
    """``lambda1 * FactualScore + lambda2 * CoherenceScore``."""
    factual = factual_scorer(z, y)
    coherence = coherence_scorer(z, y)
    for name, value in (("factual", factual), ("coherence", coherence)):
        if not (0.0 <= value <= 1.0):
            raise ContractError(f"{name} score {value!r} outside [0, 1]")
    return weights.lambda1 * factual + weights.lambda2 * coherence


@dataclass(frozen=True, eq=False)
class ToyPolicy:
    """Softmax policy over a small discrete action set (e.g. evidence subsets)."""

    theta: np.ndarray
    action_space: tuple[Any, ...]

    def __post_init__(self) -> None:
        theta = np.array(self.theta, dtype=np.float64)
        if theta.ndim != 1 or not np.all(np.isfinite(theta)):
            raise ValueError("theta must be a finite vector")
        actions = tuple(self.action_space)
        if not actions:
            raise ValueError("action space must be non-empty")
        if len(actions) != theta.size:
            raise ValueError("need one logit per action")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "action_space", actions)

    @property
    def probs(self) -> np.ndarray:
        z = np.exp(self.theta - self.theta.max())
        return z / z.sum()

    def with_theta(self, theta: np.ndarray) -> "ToyPolicy":
        return ToyPolicy(theta, self.action_space)


def _rewards(policy: ToyPolicy, reward_fn: Callable[[Any], float]) -> np.ndarray:
    r = np.array([float(reward_fn(a)) for a in policy.action_space])
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    return r


def _score_terms(policy: ToyPolicy, r: np.ndarray) -> np.ndarray:
    """Row a holds ``R(a) * grad log p(a)``; for a softmax, grad log p(a) = e_a - p."""
    p = policy.probs
    return r[:, None] * (np.eye(p.size) - p[None, :])


def expected_reward(policy: ToyPolicy, reward_fn: Callable[[Any], float]) -> float:
    """J(theta) by enumeration of the action space."""
    return float(math.fsum(policy.probs * _rewards(policy, reward_fn)))


def score_function_gradient(policy: ToyPolicy, reward_fn: Callable[[Any], float]) -> np.ndarray:
    """``E_p[R(a) grad log p(a)]`` evaluated exactly over all actions."""
    p = policy.probs
    return p @ _score_terms(policy, _rewards(policy, reward_fn))


def reinforce_gradient(
    policy: ToyPolicy,
    reward_fn: Callable[[Any], float],
    num_samples: int,
    seed: int | np.random.Generator | None = None,
) -> np.ndarray:
    """Monte-Carlo estimate of grad J(theta) from ``num_samples`` sampled actions."""
    if num_samples < 1:
        raise ValueError("num_samples must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = policy.probs
    actions = rng.choice(p.size, size=num_samples, p=p)
    freq = np.bincount(actions, minlength=p.size) / num_samples
    return freq @ _score_terms(policy, _rewards(policy, reward_fn))
