from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from prefleak.backends import NO_WAIT, FixedBackend
from prefleak.core import Instruction, Transcript, Turn
from prefleak.dialogue import DialogueLimits, run_dialogue
from prefleak.redaction import (
    BUDGET_TOKEN,
    PLACEHOLDER,
    PRICE_TOKEN,
    RedactionUnavailableError,
    price_tokens,
    product_mentions,
    redact_dollars,
    redact_persona,
    verify_redaction,
)
from prefleak.scripted import ScriptedBuyer, ScriptedPersonaRedactor, ScriptedSeller


def one(text: str) -> Transcript:
    return Transcript((Turn("buyer", text),))


def corpus(fixture_dir):
    return {p.name: Transcript.from_text(p.read_text()) for p in sorted(fixture_dir.glob("*.txt"))}


def test_redact_dollars_examples():
    out, rep = redact_dollars(one("priced at $49.99 today"))
    assert out.turns[0].text == f"priced at {PRICE_TOKEN} today"
    assert rep.replacements == 1
    out, _ = redact_dollars(one("$1,299.00 or 50 dollars"))
    assert out.turns[0].text == f"{PRICE_TOKEN} or {PRICE_TOKEN}"
    plain = one("no amounts here, just 30-hour battery and 4.1/5")
    out, rep = redact_dollars(plain)
    assert out == plain and rep.replacements == 0


def test_redact_budget_phrases():
    out, _ = redact_dollars(one("Within my budget? My budget is small, I can afford little."))
    assert out.turns[0].text == f"{BUDGET_TOKEN}? {BUDGET_TOKEN} is small, I {BUDGET_TOKEN} little."


def test_unmarked_numbers_survive():
    out, _ = redact_dollars(one("around 200 would be fine"))
    assert out.turns[0].text == "around 200 would be fine"


def test_empty_transcript_passes_through():
    out, rep = redact_dollars(Transcript(()))
    assert out == Transcript(()) and rep.accepted


def test_verify_flags_currency():
    rep = verify_redaction(Transcript((Turn("buyer", "ok"), Turn("seller", "It is $5."))), "dollar_redacted")
    assert rep.residual_violations == ((1, "$5"),)


def test_verify_persona_flags_occupation():
    rep = verify_redaction(one(f"As a consultant I want ANC. {PLACEHOLDER}"), "persona_redacted")
    assert rep.residual_violations == ((0, "consultant"),)


def test_verify_persona_ignores_product_names():
    rep = verify_redaction(one("The Zenith Audiophile Edition at $399.99 please."), "persona_redacted")
    assert rep.accepted


def test_fixture_corpus_dollar_redaction(fixture_dir):
    docs = corpus(fixture_dir)
    assert len(docs) == 50
    for name, t in docs.items():
        out, rep = redact_dollars(t)
        assert rep.accepted, name
        assert verify_redaction(out, "dollar_redacted").accepted, name
        assert redact_dollars(out)[0] == out, name
        assert [x.role for x in out.turns] == [x.role for x in t.turns]


def test_sample_dialogue_dollar_redaction(fixture_dir):
    t = Transcript.from_text((fixture_dir / "sample_dialogue_vp50.txt").read_text())
    out, rep = redact_dollars(t)
    assert "$" not in out.to_text()
    assert rep.replacements == 8
    assert "SoundCore Pro X" in out.to_text()


money = st.builds(
    lambda d, c, form: form.format(d=d, c=c),
    st.integers(0, 99999),
    st.integers(0, 99),
    st.sampled_from(["${d}", "${d}.{c:02d}", "{d} dollars", "$ {d}", "${d}k"]),
)
filler = st.text(st.sampled_from(list("abc xyz,.!?-")), max_size=20)


@given(st.lists(st.one_of(money, filler), min_size=1, max_size=8))
def test_redact_dollars_properties(parts):
    text = " ".join(parts).strip() or "x"
    t = one(text)
    out, _ = redact_dollars(t)
    assert verify_redaction(out, "dollar_redacted").accepted
    assert redact_dollars(out)[0] == out
    # Everything outside the replaced spans is untouched.
    kept = out.turns[0].text.split(PRICE_TOKEN)
    pos = 0
    for piece in kept:
        idx = text.find(piece, pos)
        assert idx >= 0
        pos = idx + len(piece)


def test_persona_redaction_scripted(fixture_dir):
    t = Transcript.from_text((fixture_dir / "sample_dialogue_vp50.txt").read_text())
    out, rep = redact_persona(t, ScriptedPersonaRedactor(), policy=NO_WAIT)
    assert rep.accepted and rep.replacements > 0
    first = out.turns[0].text
    assert "grad student" not in first and "library" not in first
    assert "wireless headphones" in first and PLACEHOLDER in first


def test_opening_turns_are_persona_clean(fixture_dir):
    for path in sorted(fixture_dir.glob("opening_*.txt")):
        t = Transcript.from_text(path.read_text())
        assert verify_redaction(t, "persona_redacted").accepted, path.name
    vp100 = Transcript.from_text((fixture_dir / "opening_vp100.txt").read_text())
    assert "reliable wireless headphones for [PERSONA REDACTED]." in vp100.turns[0].text


def test_persona_redaction_preserves_products_and_prices(fixture_dir):
    for name, t in corpus(fixture_dir).items():
        out, rep = redact_persona(t, ScriptedPersonaRedactor(), policy=NO_WAIT)
        for before, after in zip(t.turns, out.turns):
            assert sorted(price_tokens(before.text)) == sorted(price_tokens(after.text)), name
            assert product_mentions(before.text) == product_mentions(after.text), name
        assert rep.accepted, (name, rep.residual_violations)


def test_gagged_transcript_unchanged_by_persona_redaction():
    t = run_dialogue(Instruction.numeric(30000), DialogueLimits(), ScriptedBuyer(), ScriptedSeller(), seed=3, policy=NO_WAIT)
    out, rep = redact_persona(t, ScriptedPersonaRedactor(), policy=NO_WAIT)
    assert out == t and rep.replacements == 0


def test_persona_redactor_that_drops_prices_is_flagged():
    t = Transcript((Turn("buyer", "I'm a student."), Turn("seller", "The SoundCore Pro X is $49.99.")))
    bad = FixedBackend(f"[BUYER] I'm a {PLACEHOLDER}.\n\n[SELLER] The SoundCore Pro X is cheap.")
    out, rep = redact_persona(t, bad, policy=NO_WAIT)
    assert not rep.accepted
    assert (1, "<price tokens changed>") in rep.residual_violations
    assert bad.calls == 2  # one re-pass


def test_persona_redactor_malformed_output():
    t = one("I'm a student.")
    with pytest.raises(RedactionUnavailableError):
        redact_persona(t, FixedBackend("I can't do that."), policy=NO_WAIT)
