"""Landmark-based registration error metrics and their aggregation.

Per landmark pair the target registration error (TRE) is the Euclidean
distance between a fixed landmark and its warped counterpart; dividing by
the fixed image's diagonal gives the relative TRE (rTRE), comparable across
image sizes. Per case we keep the median (MrTRE) and maximum (SrTRE) of the
rTRE values plus robustness: the fraction of landmarks whose TRE strictly
improved over the initial moving position. Dataset-level statistics apply
mean/median over the per-case values in a cascade (e.g. AMrTRE = dataset
mean of per-case median rTRE). Failed registrations are evaluated as if
they returned the moving landmarks unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import status
from .dataset import LandmarkSet
from .errors import (
    ContractViolation,
    EmptyGroup,
    EmptyInput,
    LengthMismatch,
    NonPositiveDiagonal,
)


@dataclass(frozen=True)
class CaseMetrics:
    """Metrics of a single registration case."""

    case_id: int
    status: str
    initial_median_rtre: float
    initial_max_rtre: float
    final_median_rtre: float
    final_max_rtre: float
    robustness: float
    landmark_count_used: int
    wall_time_s: float = 0.0
    normalized_time_s: float = 0.0
    # grouping tags, carried along for reports and multi-experiment summaries
    method: str = ""
    scope: str = ""
    tissue_type: str = ""
    sample_name: str = ""


@dataclass(frozen=True)
class DatasetSummary:
    """Aggregate statistics of one (method, scope) group."""

    method: str
    scope: str
    avg_median_rtre: float  # AMrTRE
    std_median_rtre: float
    median_median_rtre: float  # MMrTRE
    avg_max_rtre: float  # ASrTRE
    std_max_rtre: float
    avg_robustness: float
    std_robustness: float
    median_robustness: float
    avg_time_min: float
    std_time_min: float
    case_count: int
    failure_count: int


def _points(landmarks) -> np.ndarray:
    pts = landmarks.points if isinstance(landmarks, LandmarkSet) else np.asarray(landmarks, float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise LengthMismatch(f"expected (n, 2) landmark array, got shape {pts.shape}")
    return pts


def euclidean_tre(a, b) -> np.ndarray:
    """Per-row Euclidean distance between two row-aligned landmark sets."""
    pa, pb = _points(a), _points(b)
    if len(pa) != len(pb):
        raise LengthMismatch(f"landmark counts differ: {len(pa)} vs {len(pb)}")
    if len(pa) == 0:
        raise EmptyInput("cannot compute TRE of empty landmark sets")
    return np.linalg.norm(pa - pb, axis=1)


def relative_tre(tres, diagonal: float) -> np.ndarray:
    """Normalize TREs by the fixed image's diagonal."""
    if diagonal <= 0:
        raise NonPositiveDiagonal(f"image diagonal must be > 0, got {diagonal}")
    return np.asarray(tres, dtype=np.float64) / float(diagonal)


def robustness(fixed, moving, warped) -> float:
    """Fraction of landmarks whose TRE strictly improved over the initial one.

    Ties count as not improved, so an identity registration scores 0.
    """
    initial = euclidean_tre(fixed, moving)
    final = euclidean_tre(fixed, warped)
    return float(np.count_nonzero(final < initial)) / len(initial)


def substitute_failure(case_status: str, moving: LandmarkSet) -> LandmarkSet:
    """Stand-in warped landmarks for a case that produced none.

    A failed, timed-out or skipped registration is evaluated at the initial
    position: the moving landmarks double as the warped set, which pins its
    final statistics to the initial ones and its robustness to 0.
    """
    if case_status not in status.SUBSTITUTED:
        raise ContractViolation(
            f"failure substitution applies to {sorted(status.SUBSTITUTED)} cases, "
            f"not {case_status!r}"
        )
    return moving


def case_statistics(
    fixed,
    moving,
    warped,
    diagonal: float,
    *,
    case_id: int = 0,
    case_status: str = status.COMPLETED,
    wall_time_s: float = 0.0,
    normalized_time_s: float = 0.0,
    method: str = "",
    scope: str = "",
    tissue_type: str = "",
    sample_name: str = "",
) -> CaseMetrics:
    """Compute one case's metrics from already length-aligned landmark sets.

    The median of an even-length list is the mean of the two central values.
    """
    initial_tre = euclidean_tre(fixed, moving)
    final_tre = euclidean_tre(fixed, warped)
    initial = relative_tre(initial_tre, diagonal)
    final = relative_tre(final_tre, diagonal)
    return CaseMetrics(
        case_id=case_id,
        status=case_status,
        initial_median_rtre=float(np.median(initial)),
        initial_max_rtre=float(np.max(initial)),
        final_median_rtre=float(np.median(final)),
        final_max_rtre=float(np.max(final)),
        robustness=float(np.count_nonzero(final_tre < initial_tre)) / len(initial),
        landmark_count_used=len(initial),
        wall_time_s=wall_time_s,
        normalized_time_s=normalized_time_s,
        method=method,
        scope=scope,
        tissue_type=tissue_type,
        sample_name=sample_name,
    )


def dataset_aggregate(
    records: list[CaseMetrics], grouping: tuple[str, str] | None = None
) -> DatasetSummary:
    """Aggregate per-case metrics of one (method, scope) group.

    Mean/median/std run over ALL cases, failure-substituted ones included;
    std is the population form. Time statistics are in minutes over executed
    (non-skipped) cases, based on machine-normalized times, and include
    failed cases' measured wall time.
    """
    if not records:
        raise EmptyGroup("cannot aggregate an empty record list")
    method, scope = grouping if grouping else (records[0].method, records[0].scope)
    medians = np.array([r.final_median_rtre for r in records])
    maxima = np.array([r.final_max_rtre for r in records])
    robust = np.array([r.robustness for r in records])
    times_min = np.array(
        [r.normalized_time_s / 60.0 for r in records if r.status != status.SKIPPED]
    )
    return DatasetSummary(
        method=method,
        scope=scope,
        avg_median_rtre=float(np.mean(medians)),
        std_median_rtre=float(np.std(medians)),
        median_median_rtre=float(np.median(medians)),
        avg_max_rtre=float(np.mean(maxima)),
        std_max_rtre=float(np.std(maxima)),
        avg_robustness=float(np.mean(robust)),
        std_robustness=float(np.std(robust)),
        median_robustness=float(np.median(robust)),
        avg_time_min=float(np.mean(times_min)) if len(times_min) else float("nan"),
        std_time_min=float(np.std(times_min)) if len(times_min) else float("nan"),
        case_count=len(records),
        failure_count=sum(1 for r in records if r.status in status.FAILURE_LIKE),
    )


def aggregate_by_group(records: list[CaseMetrics]) -> list[DatasetSummary]:
    """Aggregate records per distinct (method, scope) pair, in first-seen order."""
    groups: dict[tuple[str, str], list[CaseMetrics]] = {}
    for record in records:
        groups.setdefault((record.method, record.scope), []).append(record)
    return [dataset_aggregate(group, key) for key, group in groups.items()]
