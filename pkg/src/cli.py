"""
CHE Toolkit - Command Line
============================
Batch entry points: ``gen``, ``train``, ``eval``, ``sweep`` and ``attribute``.

Usage: python -m src.cli <command> [--config PATH] [--set key=value ...]
                                   [--seed INT] [--out DIR] [--jobs INT]

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

from config.settings import settings
from src.attribution import attribution_summary, feature_contribution, top_predicted_code
from src.checkpoint import check_vocab, load_checkpoint
from src.errors import CheError, ConfigError, InvalidArgumentError
from src.evaluation import build_report, evaluate
from src.export import (
    write_attribution_csv,
    write_attributions_json,
    write_report_csv,
    write_report_json,
    write_report_markdown,
)
from src.logging_setup import configure_logging
from src.models import Method, prediction_points
from src.pipeline import (
    JobOutcome,
    SweepJob,
    load_dataset,
    run_job,
    train_method,
    write_metrics_snapshot,
    write_run_artifacts,
)
from src.run_config import RunConfig, format_value, grid_points, parse_assignments, parse_grid, resolve
from src.synth_ehr import cohort_stats, generate_cohort, save_cohort

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _config(args: argparse.Namespace, seed_key: str = "train.seed", extra: Optional[Dict[str, str]] = None) -> RunConfig:
    overrides = parse_assignments(args.set)
    if extra:
        overrides.update({k: v for k, v in extra.items() if v is not None})
    if args.seed is not None:
        overrides[seed_key] = args.seed
    if getattr(args, "jobs", None) is not None:
        overrides["run.jobs"] = args.jobs
    return resolve(args.config, overrides)


def _split(dataset, name: str):
    return getattr(dataset.splits, name)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(args: argparse.Namespace) -> int:
    """Write both environment cohorts with their meta sidecars."""
    config = _config(args, "generator.seed", {"generator.patients": args.patients})
    out = Path(args.out or settings.DATA_DIR)
    gen = config.generator
    train_cohort, spec = generate_cohort(gen, gen.env_train)
    test_cohort, _ = generate_cohort(gen, gen.env_test, spec)
    for cohort in (train_cohort, test_cohort):
        save_cohort(cohort, out / f"{cohort.env}.jsonl", spec, gen)
        logger.info("[GEN] %s: %s", cohort.env, cohort_stats(cohort.records))
    config.write_resolved(out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    """Train base, PW or CHE and write checkpoint, curves, weights and config."""
    config = _config(args, extra={
        "run.method": args.method, "run.model_kind": args.model_kind, "run.protocol": args.protocol,
    })
    dataset = load_dataset(args.data, config)
    outcome = train_method(config, dataset)
    out = Path(args.out or settings.RUNS_DIR / f"{config.run.method.value}-seed{config.train.seed}")
    write_run_artifacts(out, config, outcome)
    if "holdout_auc" in outcome.extras:
        logger.info("[TRAIN] Propensity holdout AUC %.4f", outcome.extras["holdout_auc"])
    logger.info("[TRAIN] Artifacts written to %s", out)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    """Evaluate a checkpoint on one split and write report.json / .csv / .md."""
    config = _config(args, extra={"run.protocol": args.protocol, "run.ks": args.ks})
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data, config)
    check_vocab(model, dataset.vocab.M, dataset.vocab.N)
    scores = evaluate(model, _split(dataset, args.split), config.run.ks)
    report = build_report(
        {args.label: {config.train.seed: scores}},
        baseline=args.label,
        ks=config.run.ks,
        label=f"{args.label} on {args.split}",
    )
    report.metadata = {"checkpoint": str(args.checkpoint), "split": args.split, "protocol": config.run.protocol.value}
    out = Path(args.out or Path(args.checkpoint).parent)
    write_report_json(report, out / "report.json")
    write_report_csv(report, out / "report.csv")
    write_report_markdown(report, out / "report.md")
    config.write_resolved(out)
    return 0


def _sweep_jobs(config: RunConfig, args: argparse.Namespace, out: Path) -> List[SweepJob]:
    methods = [Method(m) for m in args.methods.split(",") if m]
    if not methods:
        raise ConfigError("sweep needs at least one method", ["--methods"])
    grid = parse_grid(args.grid)
    config.with_overrides({k: v[0] for k, v in grid.items()})  # rejects unknown grid keys early
    base_config = config.model_dump(mode="json")
    jobs = []
    for point in grid_points(grid):
        suffix = ",".join(f"{k}={v}" for k, v in point)
        for method in methods:
            label = f"{method.value}[{suffix}]" if suffix else method.value
            baseline = f"{Method.BASE.value}[{suffix}]" if suffix else Method.BASE.value
            for seed in config.run.seeds:
                jobs.append(SweepJob(
                    label=label,
                    baseline_label=baseline,
                    method=method,
                    seed=seed,
                    overrides=dict(point),
                    data_dir=str(args.data),
                    out_dir=str(out / "runs" / label.replace("/", "_") / f"seed{seed}"),
                    base_config=base_config,
                ))
    return jobs


def cmd_sweep(args: argparse.Namespace) -> int:
    """Run every (grid point x method x seed) job and aggregate one report."""
    extra = {"run.protocol": args.protocol, "run.model_kind": args.model_kind}
    if args.seeds:
        extra["run.seeds"] = args.seeds
    config = _config(args, extra=extra)
    out = Path(args.out or settings.RUNS_DIR / "sweep")
    jobs = _sweep_jobs(config, args, out)
    logger.info("[SWEEP] %d runs with up to %d workers", len(jobs), config.run.jobs)

    if config.run.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.run.jobs) as pool:
            outcomes: List[JobOutcome] = list(pool.map(run_job, jobs))
    else:
        outcomes = [run_job(job) for job in jobs]

    results: Dict[str, Dict[int, Dict[str, float]]] = {job.label: {} for job in jobs}
    warnings: List[str] = []
    diagnostics: Dict[str, Dict[str, Dict[str, float]]] = {}
    for outcome in outcomes:
        if outcome.error:
            warnings.append(f"{outcome.label} seed {outcome.seed} failed: {outcome.error}")
            continue
        results[outcome.label][outcome.seed] = outcome.metrics
        diagnostics.setdefault(outcome.label, {})[str(outcome.seed)] = outcome.diagnostics

    report = build_report(
        results,
        ks=config.run.ks,
        label=f"{config.run.model_kind.value} sweep ({config.run.protocol.value} split)",
        warnings=warnings,
        baseline_for={job.label: job.baseline_label for job in jobs},
    )
    report.metadata = {
        "runs": len(jobs),
        "failed": sum(1 for o in outcomes if o.error),
        "seeds": config.run.seeds,
        "grid": {k: [format_value(v) for v in vs] for k, vs in parse_grid(args.grid).items()},
        "diagnostics": diagnostics,
    }
    for warning in report.warnings:
        logger.warning("[SWEEP] %s", warning)
    write_report_json(report, out / "report.json")
    write_report_csv(report, out / "report.csv")
    write_report_markdown(report, out / "report.md")
    config.write_resolved(out)
    write_metrics_snapshot(out)
    return 0


def cmd_attribute(args: argparse.Namespace) -> int:
    """Per-visit contributions for one point, or top-1 codes across a split."""
    config = _config(args, extra={"run.protocol": args.protocol})
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data, config)
    check_vocab(model, dataset.vocab.M, dataset.vocab.N)
    records = _split(dataset, args.split)

    if args.patient is not None:
        matches = [r for r in records if r.id == args.patient]
        if not matches:
            raise InvalidArgumentError(f"patient {args.patient!r} not in the {args.split} split")
        record = matches[0]
        j = args.prefix or record.t - 1
        target = args.target if args.target is not None else top_predicted_code(model, record, j)
        reports = [feature_contribution(model, record, j, target)]
    else:
        points = prediction_points(records)[: config.run.attribution_points]
        reports = [
            feature_contribution(model, records[i], j, top_predicted_code(model, records[i], j))
            for i, j in points
        ]
    summary = attribution_summary(model, records, dataset.spec, config.run.attribution_points)
    out = Path(args.out or Path(args.checkpoint).parent)
    write_attributions_json(reports, out / "attributions.json", summary)
    write_attribution_csv(reports, out / "attributions.csv")
    config.write_resolved(out)
    logger.info("[ATTR] Diagnosis share %.4f over %d points", summary.dx_share, summary.points)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="flat key = value configuration file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override (repeatable)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", type=Path)
    parser.add_argument("--jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="che", description="Causal healthcare embedding toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate synthetic cohorts")
    _common(gen)
    gen.add_argument("--patients", type=int)
    gen.set_defaults(handler=cmd_gen)

    train = sub.add_parser("train", help="train base, pw or che")
    _common(train)
    train.add_argument("--data", type=Path, required=True)
    train.add_argument("--method", choices=[m.value for m in Method])
    train.add_argument("--model-kind", dest="model_kind")
    train.add_argument("--protocol", choices=["random", "env"])
    train.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(ev)
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--split", choices=["train", "val", "test"], default="test")
    ev.add_argument("--protocol", choices=["random", "env"])
    ev.add_argument("--ks", help="comma-separated cutoffs, e.g. 10,20")
    ev.add_argument("--label", default="model")
    ev.set_defaults(handler=cmd_eval)

    sweep = sub.add_parser("sweep", help="grid x seed runs with aggregated report")
    _common(sweep)
    sweep.add_argument("--data", type=Path, required=True)
    sweep.add_argument("--methods", default="base,pw,che")
    sweep.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="grid axis (repeatable); a bare KEY uses its default values")
    sweep.add_argument("--seeds", help="comma-separated seeds")
    sweep.add_argument("--model-kind", dest="model_kind")
    sweep.add_argument("--protocol", choices=["random", "env"])
    sweep.set_defaults(handler=cmd_sweep)

    attr = sub.add_parser("attribute", help="feature contributions of a checkpoint")
    _common(attr)
    attr.add_argument("--checkpoint", type=Path, required=True)
    attr.add_argument("--data", type=Path, required=True)
    attr.add_argument("--split", choices=["train", "val", "test"], default="test")
    attr.add_argument("--protocol", choices=["random", "env"])
    attr.add_argument("--patient")
    attr.add_argument("--prefix", type=int)
    attr.add_argument("--target", type=int)
    attr.set_defaults(handler=cmd_attribute)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        configure_logging()
        return args.handler(args)
    except ConfigError as exc:
        logger.error("%s", exc)
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (CheError, OSError) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
