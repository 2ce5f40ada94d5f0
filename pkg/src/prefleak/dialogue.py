"""Bounded buyer-seller dialogue loop."""

from __future__ import annotations

import re
from collections.abc import Sequence
from dataclasses import dataclass

from prefleak.backends import (
    BackendError,
    CompletionBackend,
    Message,
    RetryPolicy,
    call_with_retry,
)
from prefleak.core import Instruction, Product, Transcript, Turn, catalog
from prefleak.prompts import render_buyer_prompt, render_seller_prompt

DECISION_MARKERS = ("i'll take", "i'll go with", "i'd like to buy", "let's do the")
_DECISION_RE = re.compile(
    "|".join(re.escape(m).replace("'", "['’]") for m in DECISION_MARKERS) + r"|\bDECISION:",
    re.IGNORECASE,
)
_ROLE_LINE_RE = re.compile(r"^\s*\[(?:BUYER|SELLER)\]", re.MULTILINE)


class TrialLostError(RuntimeError):
    """A trial could not be completed; ``reason`` goes into the manifest."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class DialogueLimits:
    max_buyer_turns: int = 4
    per_call_timeout: float = 60.0
    max_retries: int = 3
    max_chars: int = 4000
    retry_base_delay: float = 1.0

    def __post_init__(self) -> None:
        if self.max_buyer_turns < 1:
            raise ValueError("max_buyer_turns must be >= 1")
        if self.max_retries < 0 or self.max_chars < 1:
            raise ValueError("max_retries must be >= 0 and max_chars >= 1")

    @property
    def retry_policy(self) -> RetryPolicy:
        return RetryPolicy(max_retries=self.max_retries, base_delay=self.retry_base_delay)


def detect_purchase_decision(buyer_turn: str) -> bool:
    return bool(_DECISION_RE.search(buyer_turn))


def clean_completion(text: str) -> str:
    """Drop a leading own-role marker and anything after a line that starts a new turn."""
    text = text.strip()
    text = re.sub(r"^\[(?:BUYER|SELLER)\]\s*", "", text)
    m = _ROLE_LINE_RE.search(text)
    if m:
        text = text[: m.start()]
    return text.strip()


class _Cleaned:
    def __init__(self, inner: CompletionBackend):
        self.inner = inner
        self.identity = inner.identity

    def complete(self, system_prompt: str, history: Sequence[Message], *, seed: int = 0) -> str:
        return clean_completion(self.inner.complete(system_prompt, history, seed=seed))


def _history_for(turns: list[Turn], me: str) -> list[Message]:
    return [("assistant" if t.role == me else "user", t.text) for t in turns]


def run_dialogue(
    instruction: Instruction,
    limits: DialogueLimits,
    buyer_backend: CompletionBackend,
    seller_backend: CompletionBackend,
    *,
    seed: int = 0,
    products: Sequence[Product] | None = None,
    policy: RetryPolicy | None = None,
) -> Transcript:
    """Alternate buyer and seller turns until a purchase decision or the buyer-turn cap.

    Raises :class:`TrialLostError` when a backend keeps failing or keeps
    returning empty text after ``limits.max_retries`` retries.
    """
    buyer_prompt = render_buyer_prompt(instruction)
    seller_prompt = render_seller_prompt(products if products is not None else catalog())
    policy = policy or limits.retry_policy
    buyer, seller = _Cleaned(buyer_backend), _Cleaned(seller_backend)
    turns: list[Turn] = []
    truncated: list[int] = []

    def speak(role: str, backend: _Cleaned, system: str) -> str:
        try:
            text, _ = call_with_retry(backend, system, _history_for(turns, role), seed=seed, policy=policy)
        except BackendError as exc:
            raise TrialLostError(f"{role} backend failed: {exc}") from exc
        if len(text) > limits.max_chars:
            truncated.append(len(turns))
            text = text[: limits.max_chars].rstrip()
        return text

    decided = False
    for buyer_turn in range(limits.max_buyer_turns):
        text = speak("buyer", buyer, buyer_prompt)
        turns.append(Turn("buyer", text))
        if detect_purchase_decision(text):
            decided = True
            break
        if buyer_turn == limits.max_buyer_turns - 1:
            break
        turns.append(Turn("seller", speak("seller", seller, seller_prompt)))
    return Transcript(tuple(turns), turn_limit_hit=not decided, truncated_turns=tuple(truncated))
