"""Query rewriting: an external rewriter with a rule-based fallback."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import httpx

from . import _http
from .core import PipelineConfig, Query
from .errors import ContractError, MiraError

log = logging.getLogger(__name__)

# Longest first so that "can you please tell me" wins over "please".
STOP_PHRASES: tuple[str, ...] = tuple(
    sorted(
        (
            "can you please tell me",
            "could you please tell me",
            "can you tell me",
            "could you tell me",
            "i would like to know",
            "i want to know",
            "please tell me",
            "please",
            "kindly",
        ),
        key=len,
        reverse=True,
    )
)
_STOP_RE = re.compile(
    r"(?<![\w])(?:" + "|".join(re.escape(p) for p in STOP_PHRASES) + r")(?![\w])",
    re.IGNORECASE,
)
_PUNCT = "?!.,;:"


class Rewriter(Protocol):
    def rewrite(self, text: str) -> str: ...


@dataclass(frozen=True)
class RewriteResult:
    original: Query
    rewritten: Query
    provider_used: str  # external | passthrough | rule_based


def normalize_text(text: str) -> str:
    """Collapse whitespace and repeated punctuation, drop space before punctuation."""
    out = " ".join(text.split())
    out = re.sub(r"([?!.,;:])\1+", r"\1", out)
    out = re.sub(r"\s+([?!.,;:])", r"\1", out)
    return out.strip()


def rule_based_rewrite(text: str) -> str:
    normalized = normalize_text(text)
    stripped = _STOP_RE.sub(" ", normalized)
    stripped = normalize_text(stripped).lstrip(_PUNCT + " ")
    # A query that was nothing but stop phrases keeps its normalized form.
    if not any(ch.isalnum() for ch in stripped):
        return normalized
    return stripped


class HttpRewriter:
    """POST {endpoint}/rewrite with {"text": ...}, expects {"text": ...}."""

    def __init__(self, endpoint: str, timeout: float = 10.0, retries: int = 1, client: httpx.Client | None = None):
        self.url = _http.join(endpoint, "/rewrite")
        self.timeout = timeout
        self.retries = retries
        self.client = client

    def rewrite(self, text: str) -> str:
        data = _http.post_json(
            self.url, {"text": text}, timeout=self.timeout, retries=self.retries, client=self.client
        )
        out = data.get("text")
        if not isinstance(out, str):
            raise ContractError("rewriter response lacks a 'text' string")
        return out


class FixtureRewriter:
    """Canned rewrites from a JSON object mapping query text to rewritten text."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.table: dict[str, str] = json.loads(self.path.read_text(encoding="utf-8"))

    def rewrite(self, text: str) -> str:
        try:
            return self.table[text]
        except KeyError:
            raise ContractError(f"no canned rewrite for {text!r}") from None


def rewrite_query(q: Query, provider: Rewriter | None, cfg: PipelineConfig) -> RewriteResult:
    """Rewrite ``q``. Never raises on provider trouble; the fallback is recorded instead."""
    if not cfg.query_rewrite_enabled:
        return RewriteResult(q, q, "passthrough")
    if provider is not None:
        try:
            out = provider.rewrite(q.text)
            if out.strip():
                return RewriteResult(q, Query(out.strip()), "external")
            log.warning("rewriter returned empty text, falling back")
        except (MiraError, OSError, ValueError) as exc:
            log.warning("rewriter failed, falling back to rule-based: %s", exc)
    return RewriteResult(q, Query(rule_based_rewrite(q.text)), "rule_based")
