"""Completion backends: the interface, retry policy and a remote chat endpoint."""

from __future__ import annotations

import logging
import os
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import httpx

logger = logging.getLogger(__name__)

# Chat history as seen by the completing agent: role is "user" or "assistant".
Message = tuple[str, str]


class BackendError(RuntimeError):
    """A completion could not be obtained."""

    def __init__(self, message: str, *, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


class EmptyCompletionError(BackendError):
    pass


@runtime_checkable
class CompletionBackend(Protocol):
    identity: str

    def complete(self, system_prompt: str, history: Sequence[Message], *, seed: int = 0) -> str: ...


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    base_delay: float = 1.0
    max_delay: float = 30.0
    sleep: Callable[[float], None] = time.sleep

    def delay(self, attempt: int) -> float:
        return min(self.base_delay * (2**attempt), self.max_delay)


NO_WAIT = RetryPolicy(base_delay=0.0, sleep=lambda _s: None)


def call_with_retry(
    backend: CompletionBackend,
    system_prompt: str,
    history: Sequence[Message],
    *,
    seed: int = 0,
    policy: RetryPolicy = RetryPolicy(),
) -> tuple[str, int]:
    """Return (completion, retries used); empty completions count as failures."""
    last: BackendError | None = None
    for attempt in range(policy.max_retries + 1):
        try:
            text = backend.complete(system_prompt, history, seed=seed)
            if not text or not text.strip():
                raise EmptyCompletionError(f"{backend.identity} returned an empty completion")
            return text, attempt
        except BackendError as exc:
            last = exc
            if not exc.retryable or attempt == policy.max_retries:
                break
            wait = policy.delay(attempt)
            logger.warning("retry %d/%d after %.1fs: %s", attempt + 1, policy.max_retries, wait, exc)
            policy.sleep(wait)
    assert last is not None
    raise last


class RemoteChatBackend:
    """OpenAI-compatible ``/chat/completions`` endpoint over HTTPS.

    Sampling parameters are left at the provider defaults. One attempt per
    call; retries are handled by :func:`call_with_retry`.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        api_key: str | None = None,
        api_key_env: str = "PREFLEAK_API_KEY",
        timeout: float = 60.0,
        max_tokens: int | None = 1024,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.identity = f"remote:{model}"
        self.max_tokens = max_tokens
        key = api_key if api_key is not None else os.environ.get(api_key_env)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers

    def complete(self, system_prompt: str, history: Sequence[Message], *, seed: int = 0) -> str:
        messages = [{"role": "system", "content": system_prompt}]
        if not history:
            messages.append({"role": "user", "content": "Begin the conversation."})
        messages += [{"role": role, "content": text} for role, text in history]
        payload: dict = {"model": self.model, "messages": messages}
        if self.max_tokens:
            payload["max_tokens"] = self.max_tokens
        try:
            resp = self._client.post(self.endpoint, json=payload, headers=self._headers)
        except httpx.TransportError as exc:
            raise BackendError(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise BackendError(f"HTTP {resp.status_code} from {self.endpoint}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}", retryable=False)
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed response body: {exc}") from exc

    def close(self) -> None:
        self._client.close()


class FixedBackend:
    """Returns queued completions in order, then repeats the last one."""

    def __init__(self, *outputs: str, identity: str = "fixed"):
        if not outputs:
            raise ValueError("need at least one output")
        self.outputs = list(outputs)
        self.identity = identity
        self.calls = 0

    def complete(self, system_prompt: str, history: Sequence[Message], *, seed: int = 0) -> str:
        out = self.outputs[min(self.calls, len(self.outputs) - 1)]
        self.calls += 1
        return out


class FailingBackend:
    """Wraps a backend and fails every call whose seed is in ``fail_seeds``."""

    def __init__(self, inner: CompletionBackend, fail_seeds: set[int]):
        self.inner = inner
        self.fail_seeds = set(fail_seeds)
        self.identity = f"failing({inner.identity})"

    def complete(self, system_prompt: str, history: Sequence[Message], *, seed: int = 0) -> str:
        if seed in self.fail_seeds:
            raise BackendError("HTTP 429 rate limited (injected)")
        return self.inner.complete(system_prompt, history, seed=seed)
