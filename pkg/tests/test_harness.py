from __future__ import annotations

import logging

import pytest

from prefleak import harness
from prefleak.backends import NO_WAIT, FailingBackend
from prefleak.config import RunConfig
from prefleak.core import PlanError, Transcript, Turn, build_plan, label_for
from prefleak.scripted import ScriptedBuyer

FAST = RunConfig(n_resamples=200, concurrency=4)


def run_main(run_dir, n=2, seed=7, backends=None, **kw):
    plan = build_plan("main", n, seed)
    return plan, harness.execute(plan, run_dir, FAST, backends or harness.scripted_backends(), policy=NO_WAIT, **kw)


def test_main_n2_writes_pairs(tmp_path):
    plan, manifest = run_main(tmp_path)
    assert manifest.counts() == {harness.COMPLETE: 24}
    assert len(list((tmp_path / "transcripts").glob("*.txt"))) == 24
    assert len(list((tmp_path / "labels").glob("*.json"))) == 24
    for trial in plan.trials:
        t, label = harness.load_trial(tmp_path, trial.trial_id)
        assert label == label_for(trial)
        assert t.turns[0].role == "buyer"


def test_resume_runs_only_pending(tmp_path):
    plan, manifest = run_main(tmp_path, max_trials=10)
    assert manifest.counts() == {harness.COMPLETE: 10, harness.PENDING: 14}
    done = {tid: harness.transcript_path(tmp_path, tid).stat().st_mtime_ns for tid in harness.completed_trials(tmp_path)}
    _, manifest = run_main(tmp_path)
    assert manifest.counts() == {harness.COMPLETE: 24}
    for tid, mtime in done.items():
        assert harness.transcript_path(tmp_path, tid).stat().st_mtime_ns == mtime


def test_refuses_to_mix_plans(tmp_path):
    run_main(tmp_path, max_trials=1)
    with pytest.raises(PlanError):
        harness.execute(build_plan("main", 2, 8), tmp_path, FAST, harness.scripted_backends())


def failing_backends(plan, cell="vp_200", count=2):
    seeds = {t.seed for t in plan.trials if t.cell_id == cell and t.condition == "verbal"}
    chosen = set(sorted(seeds)[:count])
    base = harness.scripted_backends()
    return harness.Backends(FailingBackend(ScriptedBuyer(), chosen), base.seller, base.inference, base.redactor)


def test_injected_failures_reduce_n_in_one_cell(tmp_path):
    plan = build_plan("main", 4, 3)
    manifest = harness.execute(plan, tmp_path, FAST, failing_backends(plan), policy=NO_WAIT)
    lost = [tid for tid, e in manifest.trials.items() if e["status"] == harness.LOST]
    assert len(lost) == 2 and all(harness.load_label(tmp_path, tid).cell_id == "vp_200" for tid in lost)
    assert all("429" in manifest.trials[tid]["reason"] for tid in lost)
    harness.run_inference_pass(tmp_path, ("full",), harness.scripted_backends(), FAST, policy=NO_WAIT)
    result = harness.report(tmp_path, config=FAST)
    verbal = {c.cell_id: c.n for c in result.metrics[("verbal", "full")].cells}
    assert verbal == {"vp_50": 4, "vp_100": 4, "vp_150": 4, "vp_200": 2, "vp_300": 4, "vp_500": 4}


def test_write_load_round_trip_and_idempotence(tmp_path):
    plan = build_plan("main", 1, 0)
    label = label_for(plan.trials[0])
    t = Transcript((Turn("buyer", "Hello."), Turn("seller", "Hi, the SoundCore Pro X is $49.99.")))
    tp, lp = harness.write_trial(t, label, tmp_path)
    assert harness.load_trial(tmp_path, label.trial_id) == (t, label)
    before = (tp.stat().st_mtime_ns, lp.stat().st_mtime_ns)
    assert harness.write_atomic(tp, t.to_text()) is False
    harness.write_trial(t, label, tmp_path)
    assert (tp.stat().st_mtime_ns, lp.stat().st_mtime_ns) == before
    with pytest.raises(harness.CollisionError):
        harness.write_trial(Transcript((Turn("buyer", "Different."),)), label, tmp_path)


def test_files_partition_dialogue_and_labels(tmp_path):
    run_main(tmp_path)
    for tid in harness.completed_trials(tmp_path):
        text = harness.transcript_path(tmp_path, tid).read_text()
        for name in harness.LABEL_FIELD_NAMES:
            assert name not in text
        assert tid not in text
        sidecar = harness.label_path(tmp_path, tid).read_text()
        assert "[BUYER]" not in sidecar and "[SELLER]" not in sidecar


def test_fresh_runs_are_byte_identical(tmp_path):
    run_main(tmp_path / "a")
    run_main(tmp_path / "b")
    a = sorted((tmp_path / "a" / "transcripts").iterdir())
    b = sorted((tmp_path / "b" / "transcripts").iterdir())
    assert [p.name for p in a] == [p.name for p in b]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))


def test_inference_pass_counts(tmp_path):
    run_main(tmp_path)
    variants = ("full", "dollar_redacted", "persona_redacted")
    counts = harness.run_inference_pass(tmp_path, variants, harness.scripted_backends(), FAST, policy=NO_WAIT)
    assert counts == {"full": 24, "dollar_redacted": 24, "persona_redacted": 12}
    again = harness.run_inference_pass(tmp_path, variants, harness.scripted_backends(), FAST, policy=NO_WAIT)
    assert again == counts
    assert harness.scan_isolation(tmp_path, variants) == {}


def test_inference_pass_skips_missing_transcript(tmp_path, caplog):
    run_main(tmp_path)
    victim = harness.completed_trials(tmp_path)[0]
    harness.transcript_path(tmp_path, victim).unlink()
    with caplog.at_level(logging.WARNING):
        counts = harness.run_inference_pass(tmp_path, ("full",), harness.scripted_backends(), FAST, policy=NO_WAIT)
    assert counts == {"full": 23}
    assert victim in caplog.text


def test_empty_run_dir(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        counts = harness.run_inference_pass(tmp_path, ("full",), harness.scripted_backends(), FAST)
    assert counts == {"full": 0}
    assert "no completed trials" in caplog.text
    with pytest.raises(harness.ReportError):
        harness.report(tmp_path, config=FAST)


def test_report_outputs(tmp_path):
    run_main(tmp_path, n=3)
    harness.run_inference_pass(tmp_path, ("full", "dollar_redacted"), harness.scripted_backends(), FAST, policy=NO_WAIT)
    result = harness.report(tmp_path, tmp_path / "out", FAST)
    names = {p.name for p in (tmp_path / "out").iterdir()}
    assert {"slopes.csv", "comparisons.csv", "cells_verbal_full.csv", "plot_numeric_dollar_redacted.csv"} <= names
    verbal = result.metrics[("verbal", "full")]
    assert verbal.slope.slope >= 0.9 and verbal.spearman == 1.0
    assert result.metrics[("numeric", "full")].slope.slope == pytest.approx(0.0, abs=1e-12)
    plot = (tmp_path / "out" / "plot_verbal_full.csv").read_text().splitlines()
    assert plot[0] == "target,mean,ci_low,ci_high" and len(plot) == 7
    # Recomputing from persisted records reproduces the run-time numbers.
    again = harness.build_report(harness.collect_estimates([tmp_path]), FAST)
    assert repr(again.metrics) == repr(result.metrics)  # repr: spearman is NaN for the constant numeric cells


def test_single_cell_report_is_degenerate(tmp_path):
    plan = build_plan("main", 3, 1)
    harness.execute(plan, tmp_path, FAST, harness.scripted_backends(), policy=NO_WAIT)
    # Mark every other cell lost so only vp_100 reaches inference.
    manifest = harness.load_manifest(tmp_path)
    for tid in list(manifest.trials):
        if harness.load_label(tmp_path, tid).cell_id != "vp_100":
            manifest.trials[tid]["status"] = harness.LOST
    manifest.save(tmp_path)
    harness.run_inference_pass(tmp_path, ("full",), harness.scripted_backends(), FAST, policy=NO_WAIT)
    with pytest.raises(harness.ReportError, match="verbal/full"):
        harness.report(tmp_path, config=FAST)


def test_duplicate_runs_rejected(tmp_path):
    run_main(tmp_path / "a")
    run_main(tmp_path / "b")
    for d in ("a", "b"):
        harness.run_inference_pass(tmp_path / d, ("full",), harness.scripted_backends(), FAST, policy=NO_WAIT)
    with pytest.raises(harness.ReportError, match="more than one run"):
        harness.collect_estimates([tmp_path / "a", tmp_path / "b"])


def test_top_up_appends_one_per_lost(tmp_path):
    plan = build_plan("main", 3, 5)
    harness.execute(plan, tmp_path, FAST, failing_backends(plan, "vp_50", 1), policy=NO_WAIT)
    bigger = harness.top_up(tmp_path)
    assert len(bigger.trials) == len(plan.trials) + 1
    new = bigger.trials[-1]
    assert (new.condition, new.cell_id, new.trial_number) == ("verbal", "vp_50", 4)
    manifest = harness.execute(bigger, tmp_path, FAST, harness.scripted_backends(), policy=NO_WAIT)
    assert manifest.counts() == {harness.COMPLETE: 36, harness.LOST: 1}
    assert harness.load_plan(tmp_path).digest == bigger.digest == harness.load_manifest(tmp_path).plan_digest


def test_isolation_catches_leaks():
    plan = build_plan("main", 1, 0)
    label = label_for(next(t for t in plan.trials if t.cell_id == "vp_300"))
    t = Transcript((Turn("buyer", "Hello."),))
    assert harness.isolation_violations(label, t, "sys", "Transcript:\n\n" + t.to_text()) == []
    leaks = harness.isolation_violations(label, t, "sys", f"target_wtp {label.cell_id} budget $300")
    assert any("label field" in p for p in leaks)
    assert any("label value" in p for p in leaks)
    assert any("target amount" in p for p in leaks)
