"""Experiment orchestration: run every case, record results, survive restarts.

One experiment lives in ``<output_root>/<method>_<timestamp>/``:

  adapter_spec.yaml   copy of the adapter spec the run used
  cases.csv           copy of the pairing table
  run.json            method name, scope, timing parameters
  results.csv         append-only, one row per finished case
  cases/<case_id>/    per-case workspace (stdout.txt, stderr.txt, warped.csv,
                      overlay.svg when visual reports are on)
  summary/            aggregate tables and charts

results.csv is the source of truth for resuming: a case is re-run only if
it has no terminal row. Rows are appended and fsynced one at a time, so a
killed run loses at most one partial line, which is dropped on restart.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import shutil
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import status
from .adapters import (
    DEFAULT_GRACE_S,
    DEFAULT_TIMEOUT_S,
    AdapterSpec,
    cleanup_workspace,
    execute_registration,
    extract_warped_landmarks,
    load_adapter_spec,
    preprocess_image,
    render_path,
)
from .dataset import (
    ImageGeometry,
    LandmarkSet,
    RegistrationCase,
    load_pairing_table,
    parse_landmark_file,
    read_image_geometry,
    truncate_to_common,
)
from .errors import (
    EmptyCaseList,
    ExistsWithoutResume,
    IoFailure,
    MalformedOutput,
    MissingOutput,
    RegbenchError,
    RootNotWritable,
    TableUnreadable,
    UnknownPlaceholder,
)
from .metrics import CaseMetrics, case_statistics

log = logging.getLogger(__name__)

RESULT_COLUMNS = (
    "case_id",
    "fixed_image",
    "moving_image",
    "fixed_landmarks",
    "moving_landmarks",
    "tissue_type",
    "sample_name",
    "scope",
    "status",
    "exit_code",
    "wall_time_s",
    "normalized_time_s",
    "initial_median_rtre",
    "initial_max_rtre",
    "final_median_rtre",
    "final_max_rtre",
    "robustness",
    "landmark_count",
    "warped_landmarks",
    "diagonal_px",
)

RESULTS_NAME = "results.csv"
SPEC_COPY_NAME = "adapter_spec.yaml"
CASES_COPY_NAME = "cases.csv"
RUN_INFO_NAME = "run.json"


@dataclass
class BenchmarkConfig:
    """Everything one experiment run needs."""

    adapter_spec: Path
    pairing_table: Path
    output_root: Path
    scope: str = "full"
    workers: int = 1
    timeout_s: float = DEFAULT_TIMEOUT_S
    machine_factor: float = 1.0
    grace_s: float = DEFAULT_GRACE_S
    resume: bool = False
    visual_reports: bool = False
    keep_debug: bool = False
    strict_paths: bool = False
    experiment_dir: Path | None = None

    def __post_init__(self):
        self.adapter_spec = Path(self.adapter_spec)
        self.pairing_table = Path(self.pairing_table)
        self.output_root = Path(self.output_root)
        if self.experiment_dir is not None:
            self.experiment_dir = Path(self.experiment_dir)
        if self.workers < 1:
            raise RegbenchError(f"workers must be >= 1, got {self.workers}")


def prepare_environment(config: BenchmarkConfig, spec: AdapterSpec) -> Path:
    """Create or reattach to the experiment directory.

    A fresh run gets ``<root>/<method>_<timestamp>/``. With resume on, an
    explicit experiment dir is reused as-is; otherwise the newest directory
    for the method is picked up. Reusing an explicit dir without resume is
    refused rather than silently mixing two runs.
    """
    root = config.output_root
    root.mkdir(parents=True, exist_ok=True)
    if not os.access(root, os.W_OK):
        raise RootNotWritable(f"output root {root} is not writable")

    if config.experiment_dir is not None:
        exp = config.experiment_dir
        if exp.exists() and not config.resume:
            raise ExistsWithoutResume(
                f"{exp} already exists; pass resume to continue it"
            )
        exp.mkdir(parents=True, exist_ok=True)
    elif config.resume:
        candidates = sorted(root.glob(f"{spec.method_name}_*"))
        if not candidates:
            raise ExistsWithoutResume(
                f"resume requested but no {spec.method_name}_* directory under {root}"
            )
        exp = candidates[-1]
        log.info("resuming experiment %s", exp)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        exp = root / f"{spec.method_name}_{stamp}"
        n = 1
        while exp.exists():
            exp = root / f"{spec.method_name}_{stamp}-{n}"
            n += 1
        exp.mkdir()

    (exp / "cases").mkdir(exist_ok=True)
    (exp / "summary").mkdir(exist_ok=True)
    spec_copy = exp / SPEC_COPY_NAME
    if not spec_copy.exists():
        shutil.copyfile(config.adapter_spec, spec_copy)
    cases_copy = exp / CASES_COPY_NAME
    if not cases_copy.exists():
        shutil.copyfile(config.pairing_table, cases_copy)
    info = exp / RUN_INFO_NAME
    if not info.exists():
        info.write_text(
            json.dumps(
                {
                    "method": spec.method_name,
                    "scope": config.scope,
                    "timeout_s": config.timeout_s,
                    "machine_factor": config.machine_factor,
                },
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
    return exp


def load_cases(pairing_table: Path | str, strict: bool = False) -> list[RegistrationCase]:
    cases = load_pairing_table(pairing_table, strict=strict)
    if not cases:
        raise EmptyCaseList(f"no cases in {pairing_table}")
    return cases


def detect_completed(results_path: Path | str) -> dict[int, dict[str, str]]:
    """Map case_id to its terminal row, repairing a torn final line.

    A partial last line (the signature of a killed writer) is dropped and
    the file truncated. Corruption anywhere else is not repairable.
    """
    results_path = Path(results_path)
    if not results_path.exists():
        return {}
    text = results_path.read_text()
    if not text.strip():
        return {}
    lines = text.splitlines(keepends=True)
    header = next(csv.reader([lines[0].rstrip("\r\n")]))
    if tuple(header) != RESULT_COLUMNS:
        raise TableUnreadable(f"{results_path}: unexpected header {header}")

    done: dict[int, dict[str, str]] = {}
    good_bytes = len(lines[0].encode())
    for i, line in enumerate(lines[1:], start=1):
        stripped = line.rstrip("\r\n")
        if not stripped:
            good_bytes += len(line.encode())
            continue
        row = _parse_result_line(stripped)
        if row is None or not line.endswith("\n"):
            if i == len(lines) - 1:
                log.warning(
                    "%s: dropping torn final line (%d bytes)", results_path,
                    len(line.encode()),
                )
                with open(results_path, "rb+") as fh:
                    fh.truncate(good_bytes)
                break
            raise TableUnreadable(
                f"{results_path}: corrupt row at line {i + 1}; cannot resume from this table"
            )
        case_id = int(row["case_id"])
        if case_id in done:
            log.warning("%s: duplicate row for case %d, keeping the later one",
                        results_path, case_id)
        done[case_id] = row
        good_bytes += len(line.encode())
    return done


def _parse_result_line(line: str) -> dict[str, str] | None:
    try:
        fields = next(csv.reader([line]))
    except (csv.Error, StopIteration):
        return None
    if len(fields) != len(RESULT_COLUMNS):
        return None
    row = dict(zip(RESULT_COLUMNS, fields))
    try:
        int(row["case_id"])
        float(row["wall_time_s"])
    except ValueError:
        return None
    if row["status"] not in status.TERMINAL:
        return None
    return row


class ResultsTable:
    """Append-only writer for results.csv, safe across worker threads."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(RESULT_COLUMNS)
                fh.flush()
                os.fsync(fh.fileno())

    def append(self, row: dict[str, object]) -> None:
        with self._lock:
            with open(self.path, "a", newline="") as fh:
                csv.DictWriter(fh, fieldnames=RESULT_COLUMNS,
                               lineterminator="\n").writerow(row)
                fh.flush()
                os.fsync(fh.fileno())


def run_all(config: BenchmarkConfig) -> tuple[Path, list[CaseMetrics]]:
    """Run every pending case and return the complete per-case metrics.

    Already-recorded cases (when resuming) are folded in from the table,
    re-evaluated from their stored artifacts so the returned list always
    covers the whole pairing table.
    """
    spec = load_adapter_spec(config.adapter_spec)
    exp = prepare_environment(config, spec)
    cases = load_cases(config.pairing_table, strict=config.strict_paths)
    done = detect_completed(exp / RESULTS_NAME) if config.resume else {}
    table = ResultsTable(exp / RESULTS_NAME)

    pending = [c for c in cases if c.case_id not in done]
    log.info("%s: %d cases total, %d already recorded, %d to run",
             spec.method_name, len(cases), len(done), len(pending))

    fresh: dict[int, CaseMetrics] = {}

    def worker(case: RegistrationCase) -> None:
        metrics, row = _run_case(config, spec, case, exp / "cases" / str(case.case_id))
        table.append(row)
        if metrics is not None:
            fresh[case.case_id] = metrics

    if config.workers == 1:
        for case in pending:
            worker(case)
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(worker, c) for c in pending]
            for f in futures:
                f.result()

    collected = list(fresh.values())
    if done:
        collected.extend(_metrics_from_rows(done.values(), spec.method_name, config.scope))
    collected.sort(key=lambda m: m.case_id)
    return exp, collected


def _run_case(
    config: BenchmarkConfig,
    spec: AdapterSpec,
    case: RegistrationCase,
    workspace: Path,
) -> tuple[CaseMetrics | None, dict[str, object]]:
    workspace.mkdir(parents=True, exist_ok=True)

    missing = [p for p in (case.fixed_image, case.moving_image,
                           case.fixed_landmarks, case.moving_landmarks)
               if p is not None and not Path(p).exists()]
    have_landmarks = case.fixed_landmarks is not None and case.moving_landmarks is not None
    if missing:
        log.warning("case %d skipped, missing inputs: %s", case.case_id,
                    ", ".join(str(p) for p in missing))
        return _terminal_case(config, spec, case, workspace, status.SKIPPED,
                              exit_code=None, wall=0.0, normalized=0.0)

    exec_case = case
    if spec.preprocessing != "none":
        exec_case = dataclasses.replace(
            case,
            fixed_image=preprocess_image(case.fixed_image, spec.preprocessing, workspace),
            moving_image=preprocess_image(case.moving_image, spec.preprocessing, workspace),
        )

    try:
        outcome = execute_registration(
            spec, exec_case, workspace,
            timeout_s=config.timeout_s, machine_factor=config.machine_factor,
            grace=config.grace_s,
        )
    except UnknownPlaceholder as exc:
        # The command needs a value this case does not have (typically
        # landmark paths on a visual-only case): the method cannot be invoked.
        log.warning("case %d: %s", case.case_id, exc)
        with open(workspace / "stderr.txt", "a") as fh:
            fh.write(f"{exc}\n")
        return _terminal_case(config, spec, case, workspace, status.FAILED,
                              exit_code=None, wall=0.0, normalized=0.0)

    warped = None
    warped_source: Path | None = None
    final_status = outcome.status
    if outcome.status == status.COMPLETED and have_landmarks and not case.visual_only:
        try:
            warped = extract_warped_landmarks(spec, exec_case, workspace)
            warped_source = render_path(
                spec.warped_landmarks_template, exec_case, workspace, spec.method_config
            )
        except (MissingOutput, MalformedOutput) as exc:
            log.warning("case %d: %s", case.case_id, exc)
            with open(workspace / "stderr.txt", "a") as fh:
                fh.write(f"{exc}\n")
            final_status = status.FAILED

    result = _terminal_case(
        config, spec, case, workspace, final_status,
        exit_code=outcome.exit_code, wall=outcome.wall_time_s,
        normalized=outcome.normalized_time_s, warped=warped,
        warped_source=warped_source,
    )
    cleanup_workspace(spec, exec_case, workspace, keep_debug=config.keep_debug)
    return result


def _terminal_case(
    config: BenchmarkConfig,
    spec: AdapterSpec,
    case: RegistrationCase,
    workspace: Path,
    case_status: str,
    *,
    exit_code: int | None,
    wall: float,
    normalized: float,
    warped: LandmarkSet | None = None,
    warped_source: Path | None = None,
) -> tuple[CaseMetrics | None, dict[str, object]]:
    """Build the CaseMetrics and the results.csv row for a finished case."""
    # Times are recorded at millisecond precision; compute the in-memory
    # metrics from the same rounded values results.csv will hold, so
    # re-evaluating the table reproduces this run bit for bit.
    wall = round(wall, 3)
    normalized = round(normalized, 3)
    row: dict[str, object] = {
        "case_id": case.case_id,
        "fixed_image": case.fixed_image,
        "moving_image": case.moving_image,
        "fixed_landmarks": case.fixed_landmarks or "",
        "moving_landmarks": case.moving_landmarks or "",
        "tissue_type": case.tissue_type,
        "sample_name": case.sample_name,
        "scope": case.scope or config.scope,
        "status": case_status,
        "exit_code": "" if exit_code is None else exit_code,
        "wall_time_s": f"{wall:.3f}",
        "normalized_time_s": f"{normalized:.3f}",
        "warped_landmarks": "",
        "diagonal_px": "",
    }
    nan_fields = {
        "initial_median_rtre": "nan", "initial_max_rtre": "nan",
        "final_median_rtre": "nan", "final_max_rtre": "nan",
        "robustness": "nan", "landmark_count": 0,
    }

    metric_bearing = (
        not case.visual_only
        and case.fixed_landmarks is not None
        and case.moving_landmarks is not None
        and Path(case.fixed_landmarks).exists()
        and Path(case.moving_landmarks).exists()
    )
    if metric_bearing:
        try:
            geometry, diag_source = _case_geometry(case)
            diagonal = geometry.diagonal
        except RegbenchError as exc:
            # No image header and no recorded geometry: nothing to divide by.
            log.warning("case %d: cannot determine diagonal (%s)", case.case_id, exc)
            metric_bearing = False
    if not metric_bearing:
        row.update(nan_fields)
        return None, row

    fixed = parse_landmark_file(case.fixed_landmarks)
    moving = parse_landmark_file(case.moving_landmarks)
    fixed, moving = truncate_to_common(fixed, moving)
    if warped is not None and case_status == status.COMPLETED:
        fixed_t, warped = truncate_to_common(fixed, warped)
        if len(fixed_t) < len(fixed):
            fixed, moving = fixed_t, LandmarkSet(points=moving.points[: len(fixed_t)])
    else:
        # Failed, timed out or skipped: score as if nothing moved.
        warped = LandmarkSet(points=moving.points)

    metrics = case_statistics(
        fixed, moving, warped, diagonal,
        case_id=case.case_id, case_status=case_status,
        wall_time_s=wall, normalized_time_s=normalized,
        method=spec.method_name, scope=case.scope or config.scope,
        tissue_type=case.tissue_type, sample_name=case.sample_name,
    )
    log.debug("case %d diagonal from %s", case.case_id, diag_source)

    if config.visual_reports and case_status == status.COMPLETED:
        # Drawn per case as the run goes, so an aborted batch still leaves
        # an inspectable picture for everything it finished.
        from . import report

        try:
            report.render_case_overlay(
                fixed, moving, warped, workspace / "overlay.svg",
                title=f"case {case.case_id}",
                image_size=(geometry.width, geometry.height),
            )
        except (RegbenchError, OSError) as exc:
            log.warning("case %d: overlay not rendered (%s)", case.case_id, exc)

    warped_path = warped_source if warped_source is not None else workspace / "warped.csv"
    row.update(
        initial_median_rtre=repr(metrics.initial_median_rtre),
        initial_max_rtre=repr(metrics.initial_max_rtre),
        final_median_rtre=repr(metrics.final_median_rtre),
        final_max_rtre=repr(metrics.final_max_rtre),
        robustness=repr(metrics.robustness),
        landmark_count=metrics.landmark_count_used,
        warped_landmarks=str(warped_path) if warped_path.exists() else "",
        diagonal_px=repr(diagonal),
    )
    return metrics, row


def _case_geometry(case: RegistrationCase) -> tuple[ImageGeometry, str]:
    if case.fixed_geometry is not None:
        return case.fixed_geometry, "pairing table geometry"
    return read_image_geometry(case.fixed_image), "fixed image header"


def evaluate_all(experiment_dir: Path | str) -> list[CaseMetrics]:
    """Recompute every case's metrics from the recorded artifacts alone.

    Needs only the experiment directory: landmark paths, status and timing
    come from results.csv, warped landmarks from the per-case workspaces.
    Produces the same numbers as the run itself did.
    """
    experiment_dir = Path(experiment_dir)
    results = experiment_dir / RESULTS_NAME
    if not results.exists():
        raise IoFailure(f"no {RESULTS_NAME} in {experiment_dir}")
    rows = detect_completed(results)
    info = _run_info(experiment_dir)
    metrics = _metrics_from_rows(rows.values(), info.get("method", ""),
                                 info.get("scope", ""))
    metrics.sort(key=lambda m: m.case_id)
    return metrics


def _run_info(experiment_dir: Path) -> dict:
    info_path = experiment_dir / RUN_INFO_NAME
    if info_path.exists():
        return json.loads(info_path.read_text())
    return {}


def _metrics_from_rows(rows, default_method: str, default_scope: str) -> list[CaseMetrics]:
    out = []
    for row in rows:
        m = _metrics_from_row(row, default_method, default_scope)
        if m is not None:
            out.append(m)
    return out


def _metrics_from_row(
    row: dict[str, str], method: str, default_scope: str
) -> CaseMetrics | None:
    if not row["fixed_landmarks"] or not row["moving_landmarks"]:
        return None  # visual-only case, nothing to score
    if not row["diagonal_px"]:
        return None  # skipped before inputs existed
    fixed = parse_landmark_file(row["fixed_landmarks"])
    moving = parse_landmark_file(row["moving_landmarks"])
    fixed, moving = truncate_to_common(fixed, moving)
    row_status = row["status"]
    warped_path = row["warped_landmarks"]
    if row_status == status.COMPLETED and warped_path and Path(warped_path).exists():
        warped = parse_landmark_file(warped_path)
        fixed_t, warped = truncate_to_common(fixed, warped)
        if len(fixed_t) < len(fixed):
            fixed, moving = fixed_t, LandmarkSet(points=moving.points[: len(fixed_t)])
    else:
        if row_status == status.COMPLETED:
            log.warning("case %s: warped landmarks missing at %r, scoring as unregistered",
                        row["case_id"], warped_path)
            row_status = status.FAILED
        warped = LandmarkSet(points=moving.points)
    return case_statistics(
        fixed, moving, warped, float(row["diagonal_px"]),
        case_id=int(row["case_id"]), case_status=row_status,
        wall_time_s=float(row["wall_time_s"]),
        normalized_time_s=float(row["normalized_time_s"]),
        method=method, scope=row["scope"] or default_scope,
        tissue_type=row["tissue_type"], sample_name=row["sample_name"],
    )


def export_summary(
    experiment_dir: Path | str,
    metrics: list[CaseMetrics],
    *,
    visual: bool = False,
) -> Path:
    """Write the aggregate tables (and optionally charts) under summary/.

    Output is deterministic: same metrics in, byte-identical files out.
    """
    from . import report
    from .metrics import aggregate_by_group

    experiment_dir = Path(experiment_dir)
    summary_dir = experiment_dir / "summary"
    summary_dir.mkdir(exist_ok=True)

    ordered = sorted(metrics, key=lambda m: m.case_id)
    with open(summary_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["case_id", "method", "scope", "tissue_type", "sample_name", "status",
             "initial_median_rtre", "initial_max_rtre", "final_median_rtre",
             "final_max_rtre", "robustness", "landmark_count",
             "wall_time_s", "normalized_time_s"]
        )
        for m in ordered:
            writer.writerow(
                [m.case_id, m.method, m.scope, m.tissue_type, m.sample_name, m.status,
                 repr(m.initial_median_rtre), repr(m.initial_max_rtre),
                 repr(m.final_median_rtre), repr(m.final_max_rtre),
                 repr(m.robustness), m.landmark_count_used,
                 f"{m.wall_time_s:.3f}", f"{m.normalized_time_s:.3f}"]
            )

    summaries = aggregate_by_group(ordered) if ordered else []
    payload = [dataclasses.asdict(s) for s in summaries]
    for entry in payload:
        for key, value in entry.items():
            if isinstance(value, float) and math.isnan(value):
                entry[key] = None
    (summary_dir / "summary.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )

    report.render_summary_table(summaries, summary_dir / "table.csv")
    report.render_summary_table(summaries, summary_dir / "table.md")

    if visual and summaries:
        report.render_boxplots(ordered, summary_dir / "boxplot_mrtre.svg", metric="mrtre")
        report.render_radar(summaries, summary_dir / "radar.svg")
        scopes = {m.scope for m in ordered}
        if len(scopes) > 1:
            report.render_scope_comparison(ordered, summary_dir / "scopes_mrtre.svg")
        if any(m.tissue_type for m in ordered):
            report.render_tissue_breakdown(ordered, summary_dir / "tissues_mrtre.svg")
    return summary_dir
