"""Rearrange / Initial / Rethink / Final answer generation with reward scoring."""

from .generators import EchoGenerator, FixtureGenerator, Generator, HttpGenerator, prompt_digest
from .record import Citation, RtraRecord, SelectedEvidence, parse_record, serialize_record
from .reward import (
    LexicalFactualScorer,
    NegationCoherenceScorer,
    RewardWeights,
    ToyPolicy,
    expected_reward,
    reinforce_gradient,
    reward,
    score_function_gradient,
)
from .stages import (
    NO_REVISION,
    Evidence,
    StageGenerators,
    extract_citations,
    finalize,
    generate_initial,
    label_pool,
    rearrange,
    rethink,
    run_rtra,
)

__all__ = [
    "Citation",
    "EchoGenerator",
    "Evidence",
    "FixtureGenerator",
    "Generator",
    "HttpGenerator",
    "LexicalFactualScorer",
    "NO_REVISION",
    "NegationCoherenceScorer",
    "RewardWeights",
    "RtraRecord",
    "SelectedEvidence",
    "StageGenerators",
    "ToyPolicy",
    "expected_reward",
    "extract_citations",
    "finalize",
    "generate_initial",
    "label_pool",
    "parse_record",
    "prompt_digest",
    "rearrange",
    "reinforce_gradient",
    "rethink",
    "reward",
    "run_rtra",
    "score_function_gradient",
    "serialize_record",
]
