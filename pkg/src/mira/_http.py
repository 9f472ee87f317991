"""JSON-over-HTTP plumbing shared by the provider clients."""

from __future__ import annotations

import logging
import time
from typing import Any

import httpx

from .errors import ContractError, TransportError

log = logging.getLogger(__name__)


def post_json(
    url: str,
    body: dict[str, Any],
    *,
    timeout: float,
    retries: int = 1,
    backoff: float = 0.5,
    client: httpx.Client | None = None,
) -> dict[str, Any]:
    """POST ``body`` and return the decoded JSON object.

    Transport failures and 5xx answers are retried ``retries`` times, then
    raised as TransportError. Any other non-200 status or a non-object body
    is a ContractError.
    """
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            if client is not None:
                resp = client.post(url, json=body, timeout=timeout)
            else:
                resp = httpx.post(url, json=body, timeout=timeout)
        except httpx.HTTPError as exc:
            last = exc
            log.warning("POST %s failed (attempt %d): %s", url, attempt + 1, exc)
        else:
            if resp.status_code >= 500:
                last = TransportError(f"{url} answered {resp.status_code}")
                log.warning("POST %s answered %d (attempt %d)", url, resp.status_code, attempt + 1)
            elif resp.status_code != 200:
                raise ContractError(f"{url} answered {resp.status_code}")
            else:
                try:
                    data = resp.json()
                except ValueError as exc:
                    raise ContractError(f"{url} returned malformed JSON") from exc
                if not isinstance(data, dict):
                    raise ContractError(f"{url} returned a non-object body")
                return data
        if attempt < retries:
            time.sleep(backoff * (attempt + 1))
    raise TransportError(f"POST {url} failed after {retries + 1} attempts: {last}")


def join(endpoint: str, path: str) -> str:
    return endpoint.rstrip("/") + path
