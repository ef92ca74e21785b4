"""OpenAI-compatible chat-completion client.

Whole-completion turns only (no streaming). Requests are idempotent bodies
retried with exponential backoff on transport errors and retryable status
codes. API keys come from the environment at call time and are never
serialized.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)

RETRYABLE_STATUS_CODES = {408, 409, 429, 500, 502, 503, 504}
DEFAULT_TIMEOUT_SECONDS = 120.0
DEFAULT_MAX_ATTEMPTS = 3
BACKOFF_BASE_SECONDS = 1.0


class EndpointError(RuntimeError):
    """The endpoint stayed unreachable or unusable after all retries."""


class ChatClient(Protocol):
    """Anything that turns chat messages into one completion string."""

    def complete(self, messages: list[dict[str, str]], **sampling) -> str:
        ...


@dataclass(frozen=True)
class ModelEndpoint:
    """Connection settings for one chat-completion endpoint.

    ``api_key_env`` names the environment variable holding the credential;
    the credential itself is read per request and never stored.
    """

    base_url: str
    model: str
    api_key_env: Optional[str] = None
    timeout_seconds: float = DEFAULT_TIMEOUT_SECONDS
    max_attempts: int = DEFAULT_MAX_ATTEMPTS

    def api_key(self) -> Optional[str]:
        if self.api_key_env is None:
            return None
        return os.environ.get(self.api_key_env)


def _append_inferred_stop(text: str, stop: Sequence[str]) -> str:
    """Re-append the closing tag an API-side stop sequence removed.

    OpenAI-compatible servers exclude the matched stop string from the
    completion; for tag-closing stops the missing closer is unambiguous from
    the dangling opening tag, so this reconstructs what the model emitted
    rather than repairing anything it got wrong.
    """
    for seq in stop:
        if not (seq.startswith("</") and seq.endswith(">")):
            continue
        open_tag = "<" + seq[2:]
        if text.count(open_tag) > text.count(seq):
            return text + seq
    return text


class HttpChatClient:
    """Synchronous chat client over the /chat/completions wire shape."""

    def __init__(
        self,
        endpoint: ModelEndpoint,
        *,
        transport: Optional[httpx.BaseTransport] = None,
        debug_log_bodies: bool = False,
    ) -> None:
        self.endpoint = endpoint
        self._debug_log_bodies = debug_log_bodies
        self._client = httpx.Client(
            base_url=endpoint.base_url.rstrip("/"),
            timeout=endpoint.timeout_seconds,
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def complete(
        self,
        messages: list[dict[str, str]],
        *,
        temperature: float = 0.7,
        top_p: float = 1.0,
        stop: Sequence[str] = (),
        max_tokens: Optional[int] = None,
    ) -> str:
        body: dict = {
            "model": self.endpoint.model,
            "messages": messages,
            "temperature": temperature,
            "top_p": top_p,
        }
        if stop:
            body["stop"] = list(stop)
        if max_tokens is not None:
            body["max_tokens"] = max_tokens

        headers = {}
        key = self.endpoint.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"

        if self._debug_log_bodies:
            logger.debug("request body: %s", {**body, "messages": "<redacted>"})

        last_error: Optional[str] = None
        for attempt in range(self.endpoint.max_attempts):
            if attempt:
                time.sleep(BACKOFF_BASE_SECONDS * 2 ** (attempt - 1))
            try:
                response = self._client.post("/chat/completions", json=body, headers=headers)
            except httpx.HTTPError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                logger.warning("endpoint request failed (%s), attempt %d", last_error, attempt + 1)
                continue
            if response.status_code in RETRYABLE_STATUS_CODES:
                last_error = f"HTTP {response.status_code}"
                logger.warning("endpoint returned %s, attempt %d", last_error, attempt + 1)
                continue
            if response.status_code != 200:
                raise EndpointError(f"HTTP {response.status_code}: {response.text[:500]}")
            try:
                payload = response.json()
                text = payload["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise EndpointError(f"malformed completion payload: {exc}") from exc
            if self._debug_log_bodies:
                logger.debug("completion: %d chars", len(text))
            return _append_inferred_stop(text, stop)
        raise EndpointError(f"endpoint unreachable after {self.endpoint.max_attempts} attempts: {last_error}")


class ScriptedClient:
    """Deterministic in-memory client for tests and offline demos.

    ``script`` may be a list of completions consumed in order (the last entry
    repeats forever) or a callable of the messages.
    """

    def __init__(self, script) -> None:
        self._script = script
        self._calls = 0
        self.seen: list[list[dict[str, str]]] = []

    def complete(self, messages: list[dict[str, str]], **sampling) -> str:
        self.seen.append(messages)
        self._calls += 1
        if callable(self._script):
            return self._script(messages)
        index = min(self._calls - 1, len(self._script) - 1)
        return self._script[index]

    @property
    def calls(self) -> int:
        return self._calls
