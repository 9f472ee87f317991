"""Multimodal retrieval-augmented answering with a rearrange/rethink generation chain."""

from __future__ import annotations

from .core import (
    Embedding,
    ImageRef,
    PipelineConfig,
    Query,
    RagBundle,
    RetrievedEntry,
    load_config,
    save_config,
    validate_bundle,
)
from .errors import (
    ConfigError,
    ContractError,
    CorruptIndexError,
    MiraError,
    ProviderError,
    RecordParseError,
    TransportError,
)
from .pipeline import Pipeline, PipelineResult, Providers, QueryInput
from .store import IndexRecord, VectorIndex

__version__ = "1.0.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "CorruptIndexError",
    "Embedding",
    "ImageRef",
    "IndexRecord",
    "MiraError",
    "Pipeline",
    "PipelineConfig",
    "PipelineResult",
    "Providers",
    "ProviderError",
    "Query",
    "QueryInput",
    "RagBundle",
    "RecordParseError",
    "RetrievedEntry",
    "TransportError",
    "VectorIndex",
    "load_config",
    "save_config",
    "validate_bundle",
]
