from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from prefleak.backends import NO_WAIT, FailingBackend, FixedBackend
from prefleak.core import CURRENCY_RE, Instruction, Transcript, Turn, builtin_profile_pack, catalog
from prefleak.dialogue import DialogueLimits, run_dialogue
from prefleak.inference import (
    SANITY_CEILING,
    InferenceLostError,
    InferenceParseError,
    assemble_inference_input,
    infer_wtp,
    parse_inference_output,
)
from prefleak.prompts import render_inference_prompt
from prefleak.redaction import redact_dollars
from prefleak.scripted import (
    PRIOR_ESTIMATE,
    ScriptedBuyer,
    ScriptedInference,
    ScriptedSeller,
    UnrecognizedDialectError,
    scripted_oracle_inference,
)

PROFILES = builtin_profile_pack("standard").by_id()
VALID = '{"estimate": 150, "confidence": "high", "key_signals": ["a", "b", "c"]}'
T = Transcript((Turn("buyer", "Hi, what do you have?"), Turn("seller", "The SoundCore Pro X at $49.99.")))


def scripted(cell: str | None = None, budget: int | None = None, seed: int = 1) -> Transcript:
    inst = Instruction.verbal(PROFILES[cell]) if cell else Instruction.numeric(budget)  # type: ignore[arg-type]
    return run_dialogue(inst, DialogueLimits(), ScriptedBuyer(), ScriptedSeller(), seed=seed, policy=NO_WAIT)


# --- parsing -------------------------------------------------------------------------


def test_parse_record_inside_prose():
    parsed = parse_inference_output(f"Sure! Here is my answer:\n{VALID}\nHope that helps.")
    assert (parsed.estimate, parsed.confidence, parsed.key_signals, parsed.flags) == (150, "high", ("a", "b", "c"), ())


def test_parse_spelled_estimate_fails():
    with pytest.raises(InferenceParseError) as err:
        parse_inference_output('{"estimate": "one hundred", "confidence": "low", "key_signals": ["a","b","c"]}')
    assert "one hundred" in err.value.raw


def test_parse_truncates_extra_signals():
    parsed = parse_inference_output('{"estimate": 90, "confidence": "Medium", "key_signals": ["a","b","c","d"]}')
    assert parsed.key_signals == ("a", "b", "c")
    assert parsed.confidence == "medium"
    assert "key_signals_truncated" in parsed.flags


def test_parse_pads_missing_signals():
    parsed = parse_inference_output('{"estimate": 90, "confidence": "low", "key_signals": ["a"]}')
    assert parsed.key_signals == ("a", "", "")
    assert "key_signals_padded" in parsed.flags


@pytest.mark.parametrize(
    "raw",
    [
        "no json at all",
        '{"estimate": 0, "confidence": "low", "key_signals": []}',
        '{"estimate": -5, "confidence": "low", "key_signals": []}',
        '{"confidence": "low", "key_signals": []}',
        '{"estimate": 10, "confidence": "certain", "key_signals": []}',
        '{"estimate": true, "confidence": "low", "key_signals": []}',
        '{"estimate": 10, "confidence": "low", "key_signals": ',
    ],
)
def test_parse_rejects(raw):
    with pytest.raises(InferenceParseError):
        parse_inference_output(raw)


def test_parse_first_valid_wins():
    raw = '{"note": "draft"} then {"estimate": 120, "confidence": "low", "key_signals": ["x","y","z"]} and ' + VALID
    assert parse_inference_output(raw).estimate == 120


def test_parse_braces_inside_strings_and_nesting():
    raw = '{"meta": {"estimate": 77, "confidence": "high", "key_signals": ["a}", "{b", "c"]}}'
    parsed = parse_inference_output(raw)
    assert parsed.estimate == 77 and parsed.key_signals == ("a}", "{b", "c")


def test_parse_money_string_and_ceiling():
    parsed = parse_inference_output('{"estimate": "$12,500", "confidence": "low", "key_signals": ["a","b","c"]}')
    assert parsed.estimate == 12500 > SANITY_CEILING
    assert "above_sanity_ceiling" in parsed.flags


@given(st.text(max_size=200))
def test_parse_is_total(raw):
    try:
        parsed = parse_inference_output(raw)
    except InferenceParseError as exc:
        assert exc.raw == raw
    else:
        assert parsed.estimate > 0 and len(parsed.key_signals) == 3


@given(
    st.integers(1, 10**6),
    st.sampled_from(["low", "MEDIUM", "High"]),
    st.lists(st.text(max_size=10), max_size=5),
    st.text(alphabet="abc xyz.\n", max_size=30),
)
def test_parse_recovers_embedded_records(estimate, confidence, signals, prose):
    raw = prose + json.dumps({"estimate": estimate, "confidence": confidence, "key_signals": signals}) + prose
    parsed = parse_inference_output(raw)
    assert parsed.estimate == estimate
    assert parsed.key_signals == tuple((signals + ["", "", ""])[:3])


# --- infer_wtp ------------------------------------------------------------------------


def test_infer_pass_through():
    report = infer_wtp(T, "full", FixedBackend(VALID), policy=NO_WAIT)
    assert report.estimate == 150 and report.retries == 0 and report.raw == VALID


def test_infer_retries_malformed_output():
    backend = FixedBackend("garbage", "still garbage", VALID)
    report = infer_wtp(T, "full", backend, policy=NO_WAIT)
    assert report.retries == 2 and backend.calls == 3


def test_infer_gives_up():
    with pytest.raises(InferenceLostError):
        infer_wtp(T, "full", FixedBackend("garbage"), max_retries=2, policy=NO_WAIT)


def test_infer_backend_failure_is_lost():
    with pytest.raises(InferenceLostError):
        infer_wtp(T, "full", FailingBackend(FixedBackend(VALID), {0}), policy=NO_WAIT)


def test_infer_empty_transcript():
    with pytest.raises(ValueError):
        infer_wtp(Transcript(()), "full", FixedBackend(VALID))


def test_infer_checks_dollar_variant():
    with pytest.raises(ValueError):
        infer_wtp(T, "dollar_redacted", FixedBackend(VALID))
    redacted, _ = redact_dollars(T)
    assert infer_wtp(redacted, "dollar_redacted", FixedBackend(VALID), policy=NO_WAIT).variant == "dollar_redacted"


class Recording:
    identity = "recording"

    def __init__(self):
        self.inputs = []

    def complete(self, system_prompt, history, *, seed=0):
        self.inputs.append((system_prompt, history))
        return VALID


def test_inference_input_is_prompt_plus_transcript():
    backend = Recording()
    infer_wtp(T, "full", backend, policy=NO_WAIT)
    ((system, history),) = backend.inputs
    assert system == render_inference_prompt()
    assert history == [("user", "Transcript:\n\n" + T.to_text())]
    assert assemble_inference_input(T) == (system, history[0][1])


def test_dollar_redacted_input_has_no_currency():
    t, _ = redact_dollars(scripted("vp_200"))
    system, user = assemble_inference_input(t)
    assert CURRENCY_RE.search(system + user) is None


def test_inference_input_has_no_catalog_text_beyond_dialogue():
    t = scripted("vp_50")
    system, user = assemble_inference_input(t)
    for p in catalog():
        assert p.tier not in system
        if p.name not in t.to_text():
            assert p.name not in user


# --- scripted oracle ---------------------------------------------------------------------

ORACLE = {"vp_50": 67, "vp_100": 119, "vp_150": 159, "vp_200": 201, "vp_300": 400, "vp_500": 650}
RANK_FALLBACK = {"vp_50": 85, "vp_100": 170, "vp_150": 240, "vp_200": 339, "vp_300": 679, "vp_500": 960}


def test_oracle_decodes_policy_table():
    for cell, expected in ORACLE.items():
        for seed in range(3):
            assert scripted_oracle_inference(scripted(cell, seed=seed)).estimate == expected


def test_oracle_vp500_in_tier_e_band():
    est = scripted_oracle_inference(scripted("vp_500")).estimate
    zenith = catalog()[-1].price / 100
    assert zenith / 1.8 <= est <= zenith / 0.5


def test_oracle_rank_fallback_on_redacted_prices():
    for cell, expected in RANK_FALLBACK.items():
        t, _ = redact_dollars(scripted(cell))
        assert scripted_oracle_inference(t).estimate == expected


def test_oracle_gagged_prior():
    for budget in (5000, 50000):
        assert scripted_oracle_inference(scripted(budget=budget)).estimate == PRIOR_ESTIMATE


def test_oracle_purity_and_dialect():
    t = scripted("vp_150")
    assert scripted_oracle_inference(t) == scripted_oracle_inference(t)
    with pytest.raises(UnrecognizedDialectError):
        scripted_oracle_inference(T)


def test_scripted_inference_backend_round_trip():
    t = scripted("vp_300")
    assert infer_wtp(t, "full", ScriptedInference(), policy=NO_WAIT).estimate == ORACLE["vp_300"]
