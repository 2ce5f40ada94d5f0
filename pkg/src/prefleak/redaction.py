"""Dollar and persona redaction of transcripts, plus completeness checks."""

from __future__ import annotations

import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Literal

from prefleak.backends import BackendError, CompletionBackend, RetryPolicy, call_with_retry
from prefleak.core import CURRENCY_RE, Transcript, catalog, data_lines
from prefleak.prompts import render_persona_redaction_prompt

logger = logging.getLogger(__name__)

PRICE_TOKEN = "[PRICE REDACTED]"
BUDGET_TOKEN = "[BUDGET PHRASE REDACTED]"
PLACEHOLDER = "[PERSONA REDACTED]"

# Financial-situation stems. Price reactions (price, value, cheap, expensive)
# are shopping behaviour and survive persona redaction.
SITUATION_STEMS = ("budget", "afford", "save", "saving", "spend", "dollar", "invest", "thrift", "frugal", "splurge")
SITUATION_RE = re.compile(r"\b(?:" + "|".join(SITUATION_STEMS) + r")\w*", re.IGNORECASE)

RedactionVariant = Literal["dollar_redacted", "persona_redacted"]


class RedactionUnavailableError(RuntimeError):
    """The persona redactor could not produce a usable transcript."""


@dataclass(frozen=True)
class RedactionReport:
    variant: RedactionVariant
    replacements: int = 0
    residual_violations: tuple[tuple[int, str], ...] = ()
    notes: tuple[str, ...] = field(default=())

    @property
    def accepted(self) -> bool:
        return not self.residual_violations


@lru_cache(maxsize=None)
def budget_phrase_re() -> re.Pattern[str]:
    phrases = sorted(data_lines("budget_phrases.txt"), key=len, reverse=True)
    return re.compile(r"\b(?:" + "|".join(re.escape(p) for p in phrases) + r")\b", re.IGNORECASE)


@lru_cache(maxsize=None)
def persona_term_res() -> tuple[re.Pattern[str], ...]:
    return tuple(re.compile(rf"\b(?:{p})\b", re.IGNORECASE) for p in data_lines("persona_terms.txt"))


def mask_protected(text: str, product_names: Sequence[str]) -> tuple[str, list[str]]:
    """Swap product names, currency amounts and redaction tokens for opaque sentinels."""
    saved: list[str] = []

    def stash(m: re.Match[str]) -> str:
        saved.append(m.group(0))
        return f"\x00{len(saved) - 1}\x00"

    names = [re.escape(n) for n in sorted(product_names, key=len, reverse=True)]
    pattern = "|".join([*names, CURRENCY_RE.pattern, r"\[[A-Z ]+REDACTED\]"])
    return re.sub(pattern, stash, text, flags=re.IGNORECASE), saved


def unmask(text: str, saved: Sequence[str]) -> str:
    return re.sub(r"\x00(\d+)\x00", lambda m: saved[int(m.group(1))], text)


def _redact_dollar_text(text: str) -> tuple[str, int]:
    text, n_price = CURRENCY_RE.subn(PRICE_TOKEN, text)
    text, n_phrase = budget_phrase_re().subn(BUDGET_TOKEN, text)
    return text, n_price + n_phrase


def redact_dollars(t: Transcript) -> tuple[Transcript, RedactionReport]:
    """Replace currency amounts and canonical budget phrases; everything else is untouched."""
    texts, total = [], 0
    for turn in t.turns:
        new, n = _redact_dollar_text(turn.text)
        texts.append(new)
        total += n
    out = t.with_texts(texts)
    report = verify_redaction(out, "dollar_redacted")
    return out, RedactionReport("dollar_redacted", total, report.residual_violations)


def _product_names() -> list[str]:
    return [p.name for p in catalog()]


def price_tokens(text: str) -> list[str]:
    return [m.group(0) for m in CURRENCY_RE.finditer(text)]


def product_mentions(text: str, names: list[str] | None = None) -> dict[str, int]:
    low = text.lower()
    return {n: low.count(n.lower()) for n in (names or _product_names())}


def verify_redaction(t: Transcript, variant: RedactionVariant) -> RedactionReport:
    """Scan for residual patterns; violations are reported, never raised."""
    violations: list[tuple[int, str]] = []
    for i, turn in enumerate(t.turns):
        if variant == "dollar_redacted":
            found = [m.group(0) for m in CURRENCY_RE.finditer(turn.text)]
            found += [m.group(0) for m in budget_phrase_re().finditer(turn.text)]
        else:
            masked, _ = mask_protected(turn.text, _product_names())
            found = [m.group(0) for m in SITUATION_RE.finditer(masked)]
            for pat in persona_term_res():
                found += [m.group(0) for m in pat.finditer(masked)]
        violations += [(i, span) for span in found]
    return RedactionReport(variant, 0, tuple(violations))


def _preservation_problems(before: Transcript, after: Transcript) -> list[tuple[int, str]]:
    problems = []
    for i, (a, b) in enumerate(zip(before.turns, after.turns)):
        if sorted(price_tokens(a.text)) != sorted(price_tokens(b.text)):
            problems.append((i, "<price tokens changed>"))
        if product_mentions(a.text) != product_mentions(b.text):
            problems.append((i, "<product names changed>"))
    return problems


def _call_redactor(
    t: Transcript, backend: CompletionBackend, seed: int, policy: RetryPolicy
) -> Transcript:
    prompt = render_persona_redaction_prompt()
    for attempt in range(policy.max_retries + 1):
        try:
            raw, _ = call_with_retry(backend, prompt, [("user", t.to_text())], seed=seed, policy=policy)
        except BackendError as exc:
            raise RedactionUnavailableError(f"redaction backend failed: {exc}") from exc
        try:
            out = Transcript.from_text(raw.strip() + "\n")
        except ValueError:
            out = None
        if out is not None and [x.role for x in out.turns] == [x.role for x in t.turns]:
            return Transcript(out.turns, turn_limit_hit=t.turn_limit_hit)
        logger.warning("redactor returned a malformed transcript (attempt %d)", attempt + 1)
    raise RedactionUnavailableError("redactor kept returning malformed transcripts")


def redact_persona(
    t: Transcript,
    backend: CompletionBackend,
    *,
    seed: int = 0,
    policy: RetryPolicy = RetryPolicy(),
) -> tuple[Transcript, RedactionReport]:
    """Agent-backed persona redaction with one verification re-pass.

    The returned report is flagged (``accepted`` is false) when residual
    identity cues remain after the re-pass or when product names or price
    tokens were not preserved.
    """
    if not t.turns:
        return t, RedactionReport("persona_redacted")
    out = _call_redactor(t, backend, seed, policy)
    check = verify_redaction(out, "persona_redacted")
    problems = _preservation_problems(t, out)
    if not check.accepted or problems:
        out = _call_redactor(out, backend, seed, policy)
        check = verify_redaction(out, "persona_redacted")
        problems = _preservation_problems(t, out)
    replaced = sum(x.text.count(PLACEHOLDER) for x in out.turns) - sum(x.text.count(PLACEHOLDER) for x in t.turns)
    violations = check.residual_violations + tuple(problems)
    return out, RedactionReport("persona_redacted", max(replaced, 0), violations)
