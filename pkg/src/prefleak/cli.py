"""Command-line entry point: plan, run, redact, infer, stats, report, top-up."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from prefleak import harness
from prefleak.backends import BackendError
from prefleak.config import ConfigError, RunConfig, load_config
from prefleak.core import INFERENCE_VARIANTS, PackError, PlanError, build_plan
from prefleak.stats import DegenerateDesignError

EXIT_VALIDATION = 2
EXIT_BACKEND = 3
EXIT_DATA = 4

log = logging.getLogger("prefleak")


def _config(args: argparse.Namespace, run_dir: Path | None = None) -> RunConfig:
    """Config precedence: run dir config.json < --config file < command-line flags."""
    base = RunConfig()
    if run_dir is not None and (run_dir / "config.json").exists():
        base = load_config(run_dir / "config.json")
    if args.config:
        base = base.with_overrides(**load_config(args.config).to_dict())
    overrides = {
        k: getattr(args, k, None)
        for k in ("design", "trials_per_cell", "master_seed", "backend", "buyer_family", "endpoint", "model", "concurrency", "n_resamples", "bootstrap_seed", "max_buyer_turns")
    }
    if getattr(args, "variants", None):
        overrides["variants"] = tuple(args.variants)
    return base.with_overrides(**overrides)


def cmd_plan(args: argparse.Namespace) -> int:
    config = _config(args)
    plan = build_plan(config.design, config.trials_per_cell, config.master_seed)  # type: ignore[arg-type]
    manifest = harness.init_run(plan, args.run_dir, config)
    print(f"{plan.name}: {len(plan.trials)} trials, digest {manifest.plan_digest[:12]}, run {manifest.run_id}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = _config(args, args.run_dir)
    plan = harness.load_plan(args.run_dir)
    manifest = harness.execute(plan, args.run_dir, config, max_trials=args.max_trials)
    counts = manifest.counts()
    print(" ".join(f"{k}={counts.get(k, 0)}" for k in (harness.COMPLETE, harness.LOST, harness.PENDING)))
    return 0


def cmd_redact(args: argparse.Namespace) -> int:
    config = _config(args, args.run_dir)
    backends = harness.backends_from_config(config)
    written = 0
    for tid in harness.completed_trials(args.run_dir):
        label = harness.load_label(args.run_dir, tid)
        for v in config.variants:
            if v == "full" or not harness.applicable(label, v):
                continue
            _, violations = harness.redacted_transcript(args.run_dir, tid, v, backends, seed=label.seed)
            written += 1
            if violations:
                log.warning("%s %s: residual cues %s", tid, v, violations)
    print(f"{written} redacted transcripts present")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    config = _config(args, args.run_dir)
    counts = harness.run_inference_pass(args.run_dir, config.variants, harness.backends_from_config(config), config)
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    config = _config(args, args.run_dirs[0])
    result = harness.build_report(harness.collect_estimates(args.run_dirs), config)
    print(f"{'condition':<10} {'variant':<17} {'n':>5} {'slope':>7} {'95% CI':>17} {'rho':>6} {'MAE':>8} {'w25':>6}")
    for (condition, variant), m in result.metrics.items():
        ci = f"[{m.slope.ci_low:.2f}, {m.slope.ci_high:.2f}]"
        print(
            f"{condition:<10} {variant:<17} {m.n:>5} {m.slope.slope:>7.2f} {ci:>17} "
            f"{m.spearman:>6.3f} {m.mae:>8.1f} {100 * m.within_25:>5.1f}%"
        )
    for variant, d in result.factorial.items():
        s = d["slope"]
        print(f"design-aware ({variant}): slope {s.slope:.2f} [{s.ci_low:.2f}, {s.ci_high:.2f}]")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    config = _config(args, args.run_dirs[0])
    out = args.out or args.run_dirs[0] / "report"
    result = harness.build_report(harness.collect_estimates(args.run_dirs), config)
    for path in harness.write_report(result, out):
        print(path)
    return 0


def cmd_top_up(args: argparse.Namespace) -> int:
    additions = None
    if args.add:
        additions = {}
        for spec in args.add:
            try:
                condition, cell, variant, scaffold, count = spec.split(":")
                additions[(condition, cell, int(variant), scaffold)] = int(count)
            except ValueError:
                raise ConfigError(f"--add expects condition:cell:variant:scaffold:count, got {spec!r}") from None
    before = len(harness.load_plan(args.run_dir).trials)
    plan = harness.top_up(args.run_dir, additions)
    print(f"added {len(plan.trials) - before} trials; run 'prefleak run {args.run_dir}' to execute them")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prefleak", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON or YAML run config")
    common.add_argument("--backend", choices=("scripted", "remote"))
    common.add_argument("--buyer-family", dest="buyer_family", choices=("auto", "role-coherent", "gagged"))
    common.add_argument("--endpoint")
    common.add_argument("--model")
    common.add_argument("--concurrency", type=int)
    common.add_argument("--max-buyer-turns", dest="max_buyer_turns", type=int)
    common.add_argument("--variants", nargs="+", choices=INFERENCE_VARIANTS)
    common.add_argument("--n-resamples", dest="n_resamples", type=int)
    common.add_argument("--bootstrap-seed", dest="bootstrap_seed", type=int)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", parents=[common], help="write plan.json and an empty manifest")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--design", choices=("main", "factorial", "stripped"))
    p.add_argument("-n", "--trials-per-cell", dest="trials_per_cell", type=int)
    p.add_argument("--seed", dest="master_seed", type=int)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", parents=[common], help="execute pending trials")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--max-trials", dest="max_trials", type=int)
    p.set_defaults(func=cmd_run)

    for name, func, text in (
        ("redact", cmd_redact, "write redacted transcript copies"),
        ("infer", cmd_infer, "run the inference pass"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("run_dir", type=Path)
        p.set_defaults(func=func)

    p = sub.add_parser("stats", parents=[common], help="print slope and accuracy metrics")
    p.add_argument("run_dirs", type=Path, nargs="+")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("report", parents=[common], help="write CSV tables and plot data")
    p.add_argument("run_dirs", type=Path, nargs="+")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("top-up", help="append new trial numbers (one per lost trial by default)")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--add", nargs="+", metavar="COND:CELL:VARIANT:SCAFFOLD:COUNT")
    p.set_defaults(func=cmd_top_up)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, PlanError, PackError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (harness.ReportError, harness.CollisionError, DegenerateDesignError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
