"""Run orchestration and persistence: plan, dialogues, redaction, inference, report.

Run directory layout::

    plan.json                       the experiment plan
    manifest.json                   run id, plan digest, per-trial status
    config.json                     config the run was planned with
    transcripts/<trial_id>.txt      dialogue only, bracket-marker format
    transcripts/<trial_id>.<variant>.txt   redacted copies
    labels/<trial_id>.json          ground-truth label only
    inference/<trial_id>.<variant>.json    inference records
    report/                         CSV tables and plot data
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import re
import tempfile
import uuid
from collections import Counter, defaultdict
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from prefleak import stats
from prefleak.backends import CompletionBackend, RemoteChatBackend, RetryPolicy
from prefleak.config import RunConfig
from prefleak.core import (
    ExperimentPlan,
    PlanError,
    PlannedTrial,
    TrialLabel,
    Transcript,
    all_profiles,
    catalog,
    extend_plan,
    instruction_for,
    label_for,
    pack_versions,
)
from prefleak.dialogue import TrialLostError, run_dialogue
from prefleak.inference import InferenceLostError, assemble_inference_input, infer_wtp
from prefleak.redaction import RedactionUnavailableError, redact_dollars, redact_persona
from prefleak.scripted import (
    PrivacyGaggedBuyer,
    RoleCoherentBuyer,
    ScriptedBuyer,
    ScriptedInference,
    ScriptedPersonaRedactor,
    ScriptedSeller,
)

logger = logging.getLogger(__name__)

PENDING, COMPLETE, LOST = "pending", "complete", "lost"


class CollisionError(FileExistsError):
    """A file already exists with different content."""


class ReportError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Backends


@dataclass
class Backends:
    buyer: CompletionBackend
    seller: CompletionBackend
    inference: CompletionBackend
    redactor: CompletionBackend

    def identity(self) -> dict[str, str]:
        return {role: getattr(self, role).identity for role in ("buyer", "seller", "inference", "redactor")}


def scripted_backends(buyer_family: str = "auto") -> Backends:
    buyer = {"auto": ScriptedBuyer, "role-coherent": RoleCoherentBuyer, "gagged": PrivacyGaggedBuyer}[buyer_family]()
    return Backends(buyer, ScriptedSeller(), ScriptedInference(), ScriptedPersonaRedactor())


def backends_from_config(config: RunConfig) -> Backends:
    if config.backend == "scripted":
        return scripted_backends(config.buyer_family)

    def remote(role: str) -> RemoteChatBackend:
        return RemoteChatBackend(
            config.endpoint or "",
            config.model_for(role),
            api_key_env=config.api_key_env,
            timeout=config.per_call_timeout,
        )

    return Backends(remote("buyer"), remote("seller"), remote("inference"), remote("redactor"))


# --------------------------------------------------------------------------
# Files


def write_atomic(path: Path, text: str) -> bool:
    """Write ``text`` to ``path`` via temp-file-and-rename.

    Returns False when identical content is already there; raises
    :class:`CollisionError` when different content is.
    """
    if path.exists():
        if path.read_text() == text:
            return False
        raise CollisionError(f"{path} already exists with different content")
    _replace(path, text)
    return True


def _replace(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def transcript_path(run_dir: Path, trial_id: str, variant: str = "full") -> Path:
    suffix = ".txt" if variant == "full" else f".{variant}.txt"
    return Path(run_dir) / "transcripts" / f"{trial_id}{suffix}"


def label_path(run_dir: Path, trial_id: str) -> Path:
    return Path(run_dir) / "labels" / f"{trial_id}.json"


def inference_path(run_dir: Path, trial_id: str, variant: str) -> Path:
    return Path(run_dir) / "inference" / f"{trial_id}.{variant}.json"


def write_trial(t: Transcript, label: TrialLabel, run_dir: Path) -> tuple[Path, Path]:
    """Persist one trial as a transcript file plus a label sidecar."""
    tp, lp = transcript_path(run_dir, label.trial_id), label_path(run_dir, label.trial_id)
    write_atomic(tp, t.to_text())
    write_atomic(lp, _dump(label.to_dict()))
    return tp, lp


def load_label(run_dir: Path, trial_id: str) -> TrialLabel:
    return TrialLabel.from_dict(json.loads(label_path(run_dir, trial_id).read_text()))


def load_trial(run_dir: Path, trial_id: str, variant: str = "full") -> tuple[Transcript, TrialLabel]:
    t = Transcript.from_text(transcript_path(run_dir, trial_id, variant).read_text())
    return t, load_label(run_dir, trial_id)


# --------------------------------------------------------------------------
# Manifest


@dataclass
class RunManifest:
    run_id: str
    plan_digest: str
    master_seed: int
    backends: dict[str, str]
    pack_versions: dict[str, str]
    trials: dict[str, dict[str, Any]] = field(default_factory=dict)

    def status(self, trial_id: str) -> str:
        return self.trials.get(trial_id, {}).get("status", PENDING)

    def counts(self) -> Counter:
        return Counter(entry["status"] for entry in self.trials.values())

    def to_json(self) -> str:
        return _dump(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> RunManifest:
        return cls(**json.loads(text))

    def save(self, run_dir: Path) -> None:
        _replace(Path(run_dir) / "manifest.json", self.to_json())


def load_plan(run_dir: Path) -> ExperimentPlan:
    return ExperimentPlan.from_json((Path(run_dir) / "plan.json").read_text())


def load_manifest(run_dir: Path) -> RunManifest:
    return RunManifest.from_json((Path(run_dir) / "manifest.json").read_text())


def init_run(plan: ExperimentPlan, run_dir: Path, config: RunConfig | None = None, backends: Backends | None = None) -> RunManifest:
    """Create (or reopen) a run directory for ``plan``; refuses to mix plans."""
    run_dir = Path(run_dir)
    plan_file = run_dir / "plan.json"
    if plan_file.exists():
        stored = ExperimentPlan.from_json(plan_file.read_text())
        if stored.digest != plan.digest:
            raise PlanError(f"{run_dir} holds a different plan (digest {stored.digest[:12]})")
    else:
        _replace(plan_file, plan.to_json())
    if config is not None and not (run_dir / "config.json").exists():
        _replace(run_dir / "config.json", _dump(config.to_dict()))
    manifest_file = run_dir / "manifest.json"
    if manifest_file.exists():
        manifest = load_manifest(run_dir)
        if manifest.plan_digest != plan.digest:
            raise PlanError(f"manifest in {run_dir} does not match the plan digest")
    else:
        manifest = RunManifest(
            run_id=uuid.uuid4().hex[:12],
            plan_digest=plan.digest,
            master_seed=plan.master_seed,
            backends=backends.identity() if backends else {},
            pack_versions=pack_versions(),
        )
    for trial in plan.trials:
        manifest.trials.setdefault(trial.trial_id, {"status": PENDING})
    manifest.save(run_dir)
    return manifest


# --------------------------------------------------------------------------
# Execution


def _run_one(trial: PlannedTrial, run_dir: Path, config: RunConfig, backends: Backends, policy: RetryPolicy | None):
    instruction = instruction_for(trial, all_profiles())
    try:
        t = run_dialogue(instruction, config.limits, backends.buyer, backends.seller, seed=trial.seed, policy=policy)
    except TrialLostError as exc:
        write_atomic(label_path(run_dir, trial.trial_id), _dump(label_for(trial, LOST).to_dict()))
        return trial.trial_id, {"status": LOST, "reason": exc.reason}
    write_trial(t, label_for(trial), run_dir)
    return trial.trial_id, {
        "status": COMPLETE,
        "turn_limit_hit": t.turn_limit_hit,
        "truncated_turns": list(t.truncated_turns),
    }


def execute(
    plan: ExperimentPlan,
    run_dir: Path,
    config: RunConfig,
    backends: Backends | None = None,
    *,
    max_trials: int | None = None,
    policy: RetryPolicy | None = None,
) -> RunManifest:
    """Run every pending trial of ``plan`` into ``run_dir``; safe to re-invoke.

    Trials run in a thread pool bounded by ``config.concurrency``. Only the
    calling thread touches the manifest. Lost trials stay lost.
    """
    run_dir = Path(run_dir)
    backends = backends or backends_from_config(config)
    manifest = init_run(plan, run_dir, config, backends)
    if not manifest.backends:
        manifest.backends = backends.identity()
    pending = [t for t in plan.trials if manifest.status(t.trial_id) == PENDING]
    if max_trials is not None:
        pending = pending[:max_trials]
    logger.info("%d pending trials in %s", len(pending), run_dir)
    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        futures = [pool.submit(_run_one, t, run_dir, config, backends, policy) for t in pending]
        for done, fut in enumerate(as_completed(futures), 1):
            trial_id, entry = fut.result()
            manifest.trials[trial_id] = entry
            if done % 50 == 0:
                manifest.save(run_dir)
    manifest.save(run_dir)
    return manifest


def top_up(run_dir: Path, additions: dict[tuple[str, str, int, str], int] | None = None) -> ExperimentPlan:
    """Append fresh trial numbers to the plan; by default one per lost trial.

    The plan and manifest digests are updated together. Lost trials keep
    their records and are never re-run.
    """
    run_dir = Path(run_dir)
    plan, manifest = load_plan(run_dir), load_manifest(run_dir)
    if additions is None:
        by_id = {t.trial_id: t for t in plan.trials}
        lost = [by_id[tid] for tid, e in manifest.trials.items() if e["status"] == LOST and tid in by_id]
        additions = dict(Counter(t.key[:4] for t in lost))
    new_plan = extend_plan(plan, additions)
    _replace(run_dir / "plan.json", new_plan.to_json())
    manifest.plan_digest = new_plan.digest
    for trial in new_plan.trials:
        manifest.trials.setdefault(trial.trial_id, {"status": PENDING})
    manifest.save(run_dir)
    return new_plan


# --------------------------------------------------------------------------
# Redaction and inference


def redacted_transcript(
    run_dir: Path,
    trial_id: str,
    variant: str,
    backends: Backends | None = None,
    *,
    seed: int = 0,
    policy: RetryPolicy | None = None,
) -> tuple[Transcript, tuple[tuple[int, str], ...]]:
    """Load the ``variant`` view of a transcript, creating the redacted copy if needed."""
    path = transcript_path(run_dir, trial_id, variant)
    full, _ = load_trial(run_dir, trial_id)
    if variant == "full":
        return full, ()
    if path.exists():
        return Transcript.from_text(path.read_text()), ()
    if variant == "dollar_redacted":
        out, rep = redact_dollars(full)
    elif variant == "persona_redacted":
        if backends is None:
            raise ValueError("persona redaction needs a redactor backend")
        out, rep = redact_persona(full, backends.redactor, seed=seed, policy=policy or RetryPolicy())
    else:
        raise ValueError(f"unknown variant {variant!r}")
    write_atomic(path, out.to_text())
    return out, rep.residual_violations


def applicable(label: TrialLabel, variant: str) -> bool:
    # Persona redaction only makes sense where a persona was delegated.
    return variant != "persona_redacted" or label.condition != "numeric"


def completed_trials(run_dir: Path) -> list[str]:
    manifest_file = Path(run_dir) / "manifest.json"
    if not manifest_file.exists():
        return []
    manifest = load_manifest(run_dir)
    return sorted(tid for tid, e in manifest.trials.items() if e["status"] == COMPLETE)


def _infer_one(run_dir: Path, trial_id: str, variant: str, backends: Backends, config: RunConfig, policy):
    label = load_label(run_dir, trial_id)
    record: dict[str, Any] = {"trial_id": trial_id, "variant": variant}
    try:
        t, violations = redacted_transcript(run_dir, trial_id, variant, backends, seed=label.seed, policy=policy)
        if violations:
            record["redaction_violations"] = [list(v) for v in violations]
        report = infer_wtp(t, variant, backends.inference, max_retries=config.max_retries, seed=label.seed, policy=policy)  # type: ignore[arg-type]
    except (InferenceLostError, RedactionUnavailableError) as exc:
        record.update(status=LOST, reason=str(exc))
    else:
        record.update(status=COMPLETE, report=report.to_dict())
    write_atomic(inference_path(run_dir, trial_id, variant), _dump(record))
    return variant, record["status"]


def run_inference_pass(
    run_dir: Path,
    variants: Sequence[str],
    backends: Backends,
    config: RunConfig,
    *,
    policy: RetryPolicy | None = None,
) -> dict[str, int]:
    """Infer every (completed trial, variant) pair that has no record yet.

    Returns the number of records per variant now present on disk.
    """
    run_dir = Path(run_dir)
    trial_ids = completed_trials(run_dir)
    if not trial_ids:
        logger.warning("no completed trials in %s", run_dir)
        return {v: 0 for v in variants}
    jobs = []
    for tid in trial_ids:
        if not transcript_path(run_dir, tid).exists():
            logger.warning("transcript for %s is missing; skipped", tid)
            continue
        label = load_label(run_dir, tid)
        for v in variants:
            if applicable(label, v) and not inference_path(run_dir, tid, v).exists():
                jobs.append((tid, v))
    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        for fut in [pool.submit(_infer_one, run_dir, tid, v, backends, config, policy) for tid, v in jobs]:
            fut.result()
    counts = Counter(r["variant"] for r in iter_inference_records(run_dir) if r["status"] == COMPLETE)
    return {v: counts.get(v, 0) for v in variants}


def iter_inference_records(run_dir: Path) -> Iterable[dict[str, Any]]:
    folder = Path(run_dir) / "inference"
    if not folder.exists():
        return
    for path in sorted(folder.glob("*.json")):
        yield json.loads(path.read_text())


# --------------------------------------------------------------------------
# Isolation


def _dollar_forms(cents: int) -> list[str]:
    d = cents // 100
    return [rf"\${d:,}(?![\d,])(?:\.00)?", rf"\${d}(?![\d,])(?:\.00)?", rf"\b{d}\s*dollars\b", rf"\b{cents}\b"]


LABEL_FIELD_NAMES = ("trial_id", "cell_id", "target_wtp", "profile_id", "trial_number", "scaffold", "condition")


def isolation_violations(label: TrialLabel, transcript: Transcript, system: str, user: str) -> list[str]:
    """Ways the assembled inference input could leak the label or source packs.

    Label values are forbidden outright. Catalog and profile text is allowed
    only where the dialogue itself contains it.
    """
    text = system + "\n" + user
    dialogue = transcript.to_text()
    problems = []
    values = [label.trial_id, label.cell_id, str(label.seed), label.condition]
    if label.profile_id:
        values.append(label.profile_id)
    for value in values:
        if re.search(rf"(?<![\w-]){re.escape(value)}(?![\w-])", text):
            problems.append(f"label value {value!r}")
    for pattern in _dollar_forms(label.target_wtp):
        if re.search(pattern, text, re.IGNORECASE):
            problems.append(f"target amount /{pattern}/")
    for name in LABEL_FIELD_NAMES:
        if name in text:
            problems.append(f"label field name {name!r}")
    fragments: list[str] = []
    for p in catalog():
        fragments += [p.description, p.tier, f"{p.rating}/5"]
        fragments += [f.strip() for f in p.description.split(". ", 1)[1].rstrip(".").split(",")]
    for profile in all_profiles().values():
        fragments += [s.strip() for s in re.split(r"(?<=\.)\s+", profile.description) if len(s.strip()) > 20]
    for frag in fragments:
        if frag and frag in text and frag not in dialogue:
            problems.append(f"pack text {frag!r}")
    return problems


def scan_isolation(run_dir: Path, variants: Sequence[str] = ("full", "dollar_redacted")) -> dict[str, list[str]]:
    """Isolation check over every completed trial; returns trial/variant -> problems."""
    out = {}
    for tid in completed_trials(run_dir):
        label = load_label(run_dir, tid)
        for v in variants:
            if not applicable(label, v):
                continue
            if v != "full" and not transcript_path(run_dir, tid, v).exists():
                continue
            t, _ = load_trial(run_dir, tid, v)
            problems = isolation_violations(label, t, *assemble_inference_input(t))
            if problems:
                out[f"{tid}.{v}"] = problems
    return out


# --------------------------------------------------------------------------
# Report


@dataclass(frozen=True)
class EstimateRow:
    trial_id: str
    condition: str
    cell_id: str
    target: int  # dollars
    profile_variant: int
    scaffold: str
    variant: str
    estimate: int


def collect_estimates(run_dirs: Sequence[Path]) -> list[EstimateRow]:
    rows, seen = [], set()
    for run_dir in run_dirs:
        for rec in iter_inference_records(run_dir):
            if rec["status"] != COMPLETE:
                continue
            key = (rec["trial_id"], rec["variant"])
            if key in seen:
                raise ReportError(f"trial {key[0]} variant {key[1]} appears in more than one run")
            seen.add(key)
            label = load_label(run_dir, rec["trial_id"])
            rows.append(
                EstimateRow(
                    label.trial_id,
                    label.condition,
                    label.cell_id,
                    label.target_wtp // 100,
                    label.variant,
                    label.scaffold,
                    rec["variant"],
                    rec["report"]["estimate"],
                )
            )
    return rows


@dataclass
class RunReport:
    metrics: dict[tuple[str, str], stats.MetricsReport]
    comparisons: list[stats.Comparison]
    factorial: dict[str, Any]
    cell_cis: dict[tuple[str, str], dict[str, tuple[float, float]]]


def _csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{x:.6g}" if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def build_report(rows: Sequence[EstimateRow], config: RunConfig) -> RunReport:
    """Metrics for every (condition, inference variant) on the baseline design.

    Baseline means profile variant 1 and scaffold A; the remaining
    combinations only feed the factorial analysis.
    """
    if not rows:
        raise ReportError("no inference records to report on")
    groups: dict[tuple[str, str], list[EstimateRow]] = defaultdict(list)
    for r in rows:
        if r.profile_variant == 1 and r.scaffold == "A":
            groups[(r.condition, r.variant)].append(r)
    metrics, cell_cis = {}, {}
    for key in sorted(groups):
        members = groups[key]
        targets = {r.cell_id: r.target for r in members}
        pairs = [(r.cell_id, float(r.estimate)) for r in members]
        try:
            metrics[key] = stats.metrics_report(
                f"{key[0]}/{key[1]}", pairs, targets, n_resamples=config.n_resamples, seed=config.bootstrap_seed
            )
        except stats.DegenerateDesignError as exc:
            raise ReportError(f"{key[0]}/{key[1]}: {exc}") from exc
        cell_cis[key] = stats.bootstrap_cell_means(
            stats.group_estimates(pairs), n_resamples=config.n_resamples, seed=config.bootstrap_seed
        )
    comparisons = []
    for other in ("numeric", "stripped"):
        for variant in ("full", "dollar_redacted", "persona_redacted"):
            a, b = metrics.get(("verbal", variant)), metrics.get((other, variant))
            if a and b and a.grid == b.grid:
                comparisons.append(stats.compare_conditions(a, b))
    return RunReport(metrics, comparisons, _factorial(rows, config), cell_cis)


def _factorial(rows: Sequence[EstimateRow], config: RunConfig) -> dict[str, Any]:
    design: dict[str, Any] = {}
    for variant in sorted({r.variant for r in rows}):
        members = [r for r in rows if r.condition == "verbal" and r.variant == variant]
        combos = {(r.profile_variant, r.scaffold) for r in members}
        if len(combos) < 2:
            continue
        data: dict[stats.FactorialKey, list[float]] = defaultdict(list)
        for r in members:
            data[(r.cell_id, r.profile_variant, r.scaffold)].append(float(r.estimate))
        targets = {r.cell_id: r.target for r in members}
        try:
            result = stats.design_aware_bootstrap(data, targets, n_resamples=config.n_resamples, seed=config.bootstrap_seed)
            decomposition = stats.variance_decomposition(data)
        except stats.DegenerateDesignError as exc:
            logger.warning("factorial analysis for %s skipped: %s", variant, exc)
            continue
        design[variant] = {"slope": result, "variance": decomposition, "targets": targets}
    return design


def write_report(report: RunReport, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    written = []

    def put(name: str, text: str) -> None:
        _replace(out_dir / name, text)
        written.append(out_dir / name)

    summary_rows = []
    for (condition, variant), m in report.metrics.items():
        lo, hi = m.mean_range
        summary_rows.append(
            (condition, variant, m.n, m.slope.slope, m.slope.ci_low, m.slope.ci_high, m.spearman, m.mae, m.within_25, lo, hi)
        )
        put(
            f"cells_{condition}_{variant}.csv",
            _csv(
                ("cell_id", "target", "n", "mean_estimate", "mae", "within_25_count", "within_25_pct"),
                ((c.cell_id, c.target, c.n, c.mean_estimate, c.mae, c.within_25_count, 100 * c.within_25_fraction) for c in m.cells),
            ),
        )
        cis = report.cell_cis[(condition, variant)]
        put(
            f"plot_{condition}_{variant}.csv",
            _csv(
                ("target", "mean", "ci_low", "ci_high"),
                ((c.target, c.mean_estimate, *cis[c.cell_id]) for c in m.cells),
            ),
        )
    put(
        "slopes.csv",
        _csv(
            ("condition", "variant", "n", "slope", "ci_low", "ci_high", "spearman", "mae", "within_25", "mean_min", "mean_max"),
            summary_rows,
        ),
    )
    put(
        "comparisons.csv",
        _csv(
            ("a", "b", "metric", "a_value", "b_value", "delta", "ci_overlap"),
            (
                (c.a_label, c.b_label, r.metric, r.a, r.b, "" if r.delta is None else r.delta, c.ci_overlap)
                for c in report.comparisons
                for r in c.rows
            ),
        ),
    )
    if report.factorial:
        put(
            "factorial.csv",
            _csv(
                ("variant", "mode", "slope", "ci_low", "ci_high", "n_resamples", "seed"),
                ((v, d["slope"].mode, d["slope"].slope, d["slope"].ci_low, d["slope"].ci_high, d["slope"].n_resamples, d["slope"].seed) for v, d in report.factorial.items()),
            ),
        )
        put(
            "variance.csv",
            _csv(
                ("variant", "cell_id", "target", "sd_combos", "sd_variants", "sd_scaffolds"),
                (
                    (v, row.cell_id, d["targets"][row.cell_id], row.sd_combos, row.sd_variants, row.sd_scaffolds)
                    for v, d in report.factorial.items()
                    for row in d["variance"]
                ),
            ),
        )
    return written


def report(run_dirs: Sequence[Path] | Path, out_dir: Path | None = None, config: RunConfig | None = None) -> RunReport:
    """Compute metrics over one or more run directories and write the tables."""
    if isinstance(run_dirs, (str, Path)):
        run_dirs = [Path(run_dirs)]
    config = config or RunConfig()
    result = build_report(collect_estimates(run_dirs), config)
    write_report(result, Path(out_dir) if out_dir else Path(run_dirs[0]) / "report")
    return result

