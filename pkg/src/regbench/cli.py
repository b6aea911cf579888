"""Command-line front end.

Subcommands mirror the benchmark lifecycle: validate inputs, pair images
into cases, run a method over the cases, re-evaluate recorded results,
and render reports. Options for `run` can also come from a YAML config
file; explicit flags win over the file, the file wins over environment
defaults.

Exit codes: 0 success, 1 environment or usage problem, 2 when a run
finished but at least one case failed or timed out.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__, report
from .adapters import (
    DEFAULT_GRACE_S,
    DEFAULT_TIMEOUT_S,
    calibrate_machine_factor,
    load_adapter_spec,
)
from .dataset import (
    generate_pairs,
    load_manifest,
    load_pairing_table,
    parse_landmark_file,
    write_pairing_table,
)
from .errors import RegbenchError
from .metrics import aggregate_by_group
from .runner import (
    BenchmarkConfig,
    evaluate_all,
    export_summary,
    run_all,
)
from .status import FAILURE_LIKE

log = logging.getLogger(__name__)

WORKERS_ENV = "REGBENCH_WORKERS"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CASES_FAILED = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regbench",
        description="benchmark external image registration methods on landmark datasets",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for progress, -vv for debug output")
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser(
        "validate", help="check a dataset manifest or pairing table for problems")
    src = p_validate.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", type=Path, help="dataset manifest (YAML)")
    src.add_argument("--pairs", type=Path, help="pairing table (CSV)")

    p_pair = sub.add_parser(
        "pair", help="expand a dataset manifest into a pairing table")
    p_pair.add_argument("--manifest", type=Path, required=True)
    p_pair.add_argument("--out", type=Path, required=True, help="pairing table to write")
    p_pair.add_argument("--scope", default="full",
                        help="which resolution scope to pair (default: full)")

    p_run = sub.add_parser("run", help="run one method over a pairing table")
    p_run.add_argument("--config", type=Path,
                       help="YAML file supplying any of the options below")
    p_run.add_argument("--pairs", type=Path, help="pairing table (CSV)")
    p_run.add_argument("--adapter", type=Path, help="adapter spec (YAML)")
    p_run.add_argument("--out", type=Path, help="experiment root directory")
    p_run.add_argument("--scope", help="scope label recorded with results (default: full)")
    p_run.add_argument("--workers", type=int,
                       help=f"parallel cases (default: ${WORKERS_ENV} or 1)")
    p_run.add_argument("--timeout", type=float,
                       help=f"per-case time limit in seconds (default: {DEFAULT_TIMEOUT_S:.0f})")
    p_run.add_argument("--grace", type=float,
                       help=f"seconds between SIGTERM and SIGKILL (default: {DEFAULT_GRACE_S:.0f})")
    p_run.add_argument("--machine-factor",
                       help="wall-time scale to the reference machine; a number, "
                            "or 'auto' to calibrate (default: 1)")
    p_run.add_argument("--resume", action="store_true", default=None,
                       help="continue the newest matching experiment instead of starting fresh")
    p_run.add_argument("--experiment-dir", type=Path,
                       help="exact experiment directory to create or resume")
    p_run.add_argument("--visual", action="store_true", default=None,
                       help="render charts after the run")
    p_run.add_argument("--keep-debug", action="store_true", default=None,
                       help="skip workspace cleanup, keep every intermediate file")
    p_run.add_argument("--strict", action="store_true", default=None,
                       help="refuse to start if any referenced input file is missing")

    p_eval = sub.add_parser(
        "evaluate", help="recompute metrics and summaries from a finished experiment")
    p_eval.add_argument("--experiment-dir", type=Path, required=True)
    p_eval.add_argument("--visual", action="store_true",
                        help="render charts along with the tables")

    p_report = sub.add_parser(
        "report", help="render charts from one or more finished experiments")
    p_report.add_argument("--experiment-dir", type=Path, action="append",
                          required=True,
                          help="experiment to include; repeat the flag to compare methods")
    p_report.add_argument("--chart", choices=("boxplot", "radar", "scope", "tissue", "all"),
                          default="all")
    p_report.add_argument("--metric", type=str.lower,
                          choices=("mrtre", "srtre", "robustness", "time"),
                          default="mrtre",
                          help="metric for the boxplot, scope and tissue charts "
                               "(case-insensitive, so MrTRE works too)")
    p_report.add_argument("--out", type=Path,
                          help="directory for the charts (default: the experiment's "
                               "summary/; required with several experiments)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "pair":
            return _cmd_pair(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        if args.command == "report":
            return _cmd_report(args)
        parser.error(f"unknown command {args.command!r}")
    except RegbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def _cmd_validate(args) -> int:
    problems: list[str] = []
    if args.manifest:
        manifests = load_manifest(args.manifest)
        n_images = sum(len(m.images) for m in manifests)
        print(f"{len(manifests)} samples, {n_images} images")
        for m in manifests:
            counts: list[int | None] = []
            for image, landmarks, _stain in m.images:
                if not Path(image).exists():
                    problems.append(f"missing image: {image}")
                if landmarks is None:
                    counts.append(None)
                    continue
                if not Path(landmarks).exists():
                    problems.append(f"missing landmarks: {landmarks}")
                    counts.append(None)
                    continue
                try:
                    counts.append(len(parse_landmark_file(landmarks)))
                except RegbenchError as exc:
                    problems.append(f"unreadable landmarks: {exc}")
                    counts.append(None)
            shown = ", ".join("?" if c is None else str(c) for c in counts)
            print(f"  {m.sample_name} [{m.tissue_type}]: "
                  f"{len(m.images)} images, landmark counts {shown}")
            readable = {c for c in counts if c is not None}
            if len(readable) > 1:
                print(f"  note: {m.sample_name} landmark counts differ; "
                      f"pairs will be scored on the common prefix")
    else:
        cases = load_pairing_table(args.pairs)
        for case in cases:
            for p in (case.fixed_image, case.moving_image,
                      case.fixed_landmarks, case.moving_landmarks):
                if p is not None and not Path(p).exists():
                    problems.append(f"case {case.case_id}: missing {p}")
        print(f"{len(cases)} cases")
    for p in problems:
        print(p)
    print("ok" if not problems else f"{len(problems)} problems")
    return EXIT_OK if not problems else EXIT_ERROR


def _cmd_pair(args) -> int:
    manifests = load_manifest(args.manifest)
    cases = generate_pairs(manifests, args.scope)
    write_pairing_table(cases, args.out)
    if not cases:
        print("warning: no pairs generated (every sample has fewer than two images)",
              file=sys.stderr)
    print(f"{len(cases)} cases -> {args.out}")
    return EXIT_OK


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise RegbenchError(f"{path}: config file must be a mapping")
    return doc


def _pick(cli_value, config: dict, key: str, default):
    """CLI flag over config file over default."""
    if cli_value is not None:
        return cli_value
    if key in config and config[key] is not None:
        return config[key]
    return default


def _cmd_run(args) -> int:
    conf = _load_config_file(args.config)

    workers_default = 1
    if os.environ.get(WORKERS_ENV):
        try:
            workers_default = int(os.environ[WORKERS_ENV])
        except ValueError:
            raise RegbenchError(
                f"{WORKERS_ENV} must be an integer, got {os.environ[WORKERS_ENV]!r}"
            ) from None

    pairs = _pick(args.pairs, conf, "pairs", None)
    adapter = _pick(args.adapter, conf, "adapter", None)
    out = _pick(args.out, conf, "out", None)
    if not pairs or not adapter or not out:
        raise RegbenchError("run needs --pairs, --adapter and --out "
                            "(flags or config file entries)")

    factor = _pick(args.machine_factor, conf, "machine_factor", 1.0)
    if isinstance(factor, str) and factor.strip().lower() == "auto":
        factor = calibrate_machine_factor()
        print(f"calibrated machine factor: {factor:.3f}")
    factor = float(factor)

    config = BenchmarkConfig(
        adapter_spec=Path(adapter),
        pairing_table=Path(pairs),
        output_root=Path(out),
        scope=str(_pick(args.scope, conf, "scope", "full")),
        workers=int(_pick(args.workers, conf, "workers", workers_default)),
        timeout_s=float(_pick(args.timeout, conf, "timeout", DEFAULT_TIMEOUT_S)),
        grace_s=float(_pick(args.grace, conf, "grace", DEFAULT_GRACE_S)),
        machine_factor=factor,
        resume=bool(_pick(args.resume, conf, "resume", False)),
        visual_reports=bool(_pick(args.visual, conf, "visual", False)),
        keep_debug=bool(_pick(args.keep_debug, conf, "keep_debug", False)),
        strict_paths=bool(_pick(args.strict, conf, "strict", False)),
        experiment_dir=args.experiment_dir,
    )
    exp, metrics = run_all(config)
    export_summary(exp, metrics, visual=config.visual_reports)
    bad = sum(1 for m in metrics if m.status in FAILURE_LIKE)
    for s in aggregate_by_group(metrics) if metrics else []:
        print(f"{s.method} [{s.scope}]: {s.case_count} cases, "
              f"{s.failure_count} failed, "
              f"avg median rTRE {s.avg_median_rtre:.6f}, "
              f"avg robustness {s.avg_robustness:.3f}")
    print(f"experiment: {exp}")
    return EXIT_CASES_FAILED if bad else EXIT_OK


def _cmd_evaluate(args) -> int:
    metrics = evaluate_all(args.experiment_dir)
    summary_dir = export_summary(args.experiment_dir, metrics, visual=args.visual)
    print(f"{len(metrics)} cases -> {summary_dir}")
    return EXIT_OK


def _cmd_report(args) -> int:
    metrics = []
    for exp in args.experiment_dir:
        metrics.extend(evaluate_all(exp))
    if not metrics:
        raise RegbenchError("no scored cases to report on")
    if args.out is None and len(args.experiment_dir) > 1:
        raise RegbenchError("--out is required when combining several experiments")
    out_dir = args.out or (Path(args.experiment_dir[0]) / "summary")
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = aggregate_by_group(metrics)
    written: list[Path] = []
    if args.chart in ("boxplot", "all"):
        written.append(report.render_boxplots(
            metrics, out_dir / f"boxplot_{args.metric}.svg", metric=args.metric))
    if args.chart in ("radar", "all"):
        written.append(report.render_radar(summaries, out_dir / "radar.svg"))
    if args.chart in ("scope", "all"):
        if len({m.scope for m in metrics if m.scope}) > (0 if args.chart == "scope" else 1):
            written.append(report.render_scope_comparison(
                metrics, out_dir / f"scopes_{args.metric}.svg", metric=args.metric))
    if args.chart in ("tissue", "all"):
        if any(m.tissue_type for m in metrics) or args.chart == "tissue":
            written.append(report.render_tissue_breakdown(
                metrics, out_dir / f"tissues_{args.metric}.svg", metric=args.metric))
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
