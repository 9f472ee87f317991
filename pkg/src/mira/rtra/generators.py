"""Generator provider contract and the stock implementations."""

from __future__ import annotations

import base64
import hashlib
import re
from pathlib import Path
from typing import Protocol, Sequence

import httpx

from .. import _http
from ..errors import ContractError

STAGE_RE = re.compile(r"^### stage: (\w+)")


class Generator(Protocol):
    def generate(self, prompt: str, images: Sequence[bytes] = ()) -> str: ...


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


def prompt_stage(prompt: str) -> str | None:
    m = STAGE_RE.match(prompt)
    return m.group(1) if m else None


class EchoGenerator:
    """Answers every prompt with a single line naming the prompt's digest."""

    def generate(self, prompt: str, images: Sequence[bytes] = ()) -> str:
        return f"prompt sha256:{prompt_digest(prompt)}"


class FixtureGenerator:
    """Canned answers from a directory.

    Looks for ``<prompt digest>.txt`` first, then ``<stage>.txt`` where the
    stage comes from the prompt's ``### stage:`` header line.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def generate(self, prompt: str, images: Sequence[bytes] = ()) -> str:
        candidates = [self.directory / f"{prompt_digest(prompt)}.txt"]
        stage = prompt_stage(prompt)
        if stage:
            candidates.append(self.directory / f"{stage}.txt")
        for path in candidates:
            if path.exists():
                return path.read_text(encoding="utf-8").strip()
        raise ContractError(f"no fixture answer for prompt {prompt_digest(prompt)} (stage {stage})")


class HttpGenerator:
    """POST {endpoint}/generate with {"prompt", "images": [base64]}; expects {"text"}."""

    def __init__(self, endpoint: str, timeout: float = 60.0, retries: int = 0, client: httpx.Client | None = None):
        self.url = _http.join(endpoint, "/generate")
        self.timeout = timeout
        self.retries = retries
        self.client = client

    def generate(self, prompt: str, images: Sequence[bytes] = ()) -> str:
        body = {"prompt": prompt, "images": [base64.b64encode(b).decode("ascii") for b in images]}
        data = _http.post_json(self.url, body, timeout=self.timeout, retries=self.retries, client=self.client)
        text = data.get("text")
        if not isinstance(text, str):
            raise ContractError("generator response lacks a 'text' string")
        return text
