"""Transcript-only willingness-to-pay inference and output parsing."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from typing import Any

from prefleak.backends import BackendError, CompletionBackend, RetryPolicy, call_with_retry
from prefleak.core import CONFIDENCE_LEVELS, InferenceReport, InferenceVariant, Transcript
from prefleak.prompts import render_inference_prompt
from prefleak.redaction import verify_redaction

logger = logging.getLogger(__name__)

SANITY_CEILING = 10_000  # dollars; larger estimates are kept and flagged
TRANSCRIPT_PREFIX = "Transcript:\n\n"

_ESTIMATE_KEYS = ("estimate", "point_estimate", "wtp_estimate", "max_wtp", "wtp")
_SIGNAL_KEYS = ("key_signals", "signals")
_MONEY_STR_RE = re.compile(r"^\$?\s*(\d{1,3}(?:,\d{3})+|\d+)(\.\d+)?$")


class InferenceParseError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class InferenceLostError(RuntimeError):
    def __init__(self, reason: str, raw: str | None = None):
        super().__init__(reason)
        self.reason = reason
        self.raw = raw


@dataclass(frozen=True)
class ParsedInference:
    estimate: int
    confidence: str
    key_signals: tuple[str, str, str]
    flags: tuple[str, ...] = ()


def assemble_inference_input(t: Transcript) -> tuple[str, str]:
    """The complete (system prompt, user message) pair the inference agent receives."""
    return render_inference_prompt(), TRANSCRIPT_PREFIX + t.to_text()


def _balanced_candidates(raw: str):
    for start, ch in enumerate(raw):
        if ch != "{":
            continue
        depth, in_str, esc = 0, False, False
        for end in range(start, len(raw)):
            c = raw[end]
            if in_str:
                if esc:
                    esc = False
                elif c == "\\":
                    esc = True
                elif c == '"':
                    in_str = False
            elif c == '"':
                in_str = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    yield raw[start : end + 1]
                    break


def _coerce_estimate(value: Any) -> tuple[int, list[str]] | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return (value, []) if value > 0 else None
    if isinstance(value, float):
        if value != value or value <= 0 or value == float("inf"):
            return None
        return (round(value), [] if value.is_integer() else ["estimate_rounded"])
    if isinstance(value, str):
        m = _MONEY_STR_RE.match(value.strip())
        if not m:
            return None
        return _coerce_estimate(float(m.group(1).replace(",", "") + (m.group(2) or "")))
    return None


def _validate(record: Any) -> ParsedInference | None:
    if not isinstance(record, dict):
        return None
    key = next((k for k in _ESTIMATE_KEYS if k in record), None)
    if key is None:
        return None
    coerced = _coerce_estimate(record[key])
    if coerced is None or coerced[0] <= 0:
        return None
    estimate, flags = coerced
    confidence = record.get("confidence")
    if not isinstance(confidence, str) or confidence.strip().lower() not in CONFIDENCE_LEVELS:
        return None
    signals_raw = next((record[k] for k in _SIGNAL_KEYS if k in record), [])
    if isinstance(signals_raw, str):
        signals_raw = [signals_raw]
    if not isinstance(signals_raw, list):
        return None
    signals = [str(s) for s in signals_raw]
    if len(signals) > 3:
        flags.append("key_signals_truncated")
    elif len(signals) < 3:
        flags.append("key_signals_padded")
    signals = (signals + ["", "", ""])[:3]
    if estimate > SANITY_CEILING:
        flags.append("above_sanity_ceiling")
    return ParsedInference(estimate, confidence.strip().lower(), tuple(signals), tuple(flags))  # type: ignore[arg-type]


def parse_inference_output(raw: str) -> ParsedInference:
    """First well-formed record embedded anywhere in ``raw``."""
    for candidate in _balanced_candidates(raw):
        try:
            record = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        parsed = _validate(record)
        if parsed is not None:
            return parsed
    raise InferenceParseError("no valid inference record found", raw)


def infer_wtp(
    t: Transcript,
    variant: InferenceVariant,
    backend: CompletionBackend,
    *,
    max_retries: int = 3,
    seed: int = 0,
    policy: RetryPolicy | None = None,
) -> InferenceReport:
    """Ask the inference agent for an estimate; unparseable replies are retried."""
    if not t.turns:
        raise ValueError("cannot infer from an empty transcript")
    if variant == "dollar_redacted" and not verify_redaction(t, "dollar_redacted").accepted:
        raise ValueError("transcript labelled dollar_redacted still contains currency or budget phrases")
    system, user = assemble_inference_input(t)
    policy = policy or RetryPolicy(max_retries=max_retries)
    raw = None
    for attempt in range(max_retries + 1):
        try:
            raw, _ = call_with_retry(backend, system, [("user", user)], seed=seed, policy=policy)
        except BackendError as exc:
            raise InferenceLostError(f"inference backend failed: {exc}") from exc
        try:
            parsed = parse_inference_output(raw)
        except InferenceParseError:
            logger.warning("unparseable inference output (attempt %d)", attempt + 1)
            continue
        return InferenceReport(
            estimate=parsed.estimate,
            confidence=parsed.confidence,  # type: ignore[arg-type]
            key_signals=parsed.key_signals,
            variant=variant,
            raw=raw,
            flags=parsed.flags,
            retries=attempt,
        )
    raise InferenceLostError(f"no parseable output after {max_retries} retries", raw)
