"""Benchmark harness for external image registration methods.

Registration quality is judged purely through annotated landmarks: the
relative target registration error of each warped landmark against its
fixed counterpart, aggregated per case and across a dataset, plus a
robustness score counting how many landmarks a method actually improved.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .dataset import (
    ImageGeometry,
    LandmarkSet,
    RegistrationCase,
    generate_pairs,
    load_manifest,
    load_pairing_table,
    parse_landmark_file,
    write_landmark_file,
    write_pairing_table,
)
from .metrics import (
    CaseMetrics,
    DatasetSummary,
    aggregate_by_group,
    case_statistics,
    dataset_aggregate,
    euclidean_tre,
    relative_tre,
    robustness,
)
from .adapters import (
    AdapterSpec,
    ExecutionOutcome,
    calibrate_machine_factor,
    execute_registration,
    execute_with_timeout,
    load_adapter_spec,
    normalize_time,
    render_command,
)

__all__ = [
    "__version__",
    "ImageGeometry",
    "LandmarkSet",
    "RegistrationCase",
    "generate_pairs",
    "load_manifest",
    "load_pairing_table",
    "parse_landmark_file",
    "write_landmark_file",
    "write_pairing_table",
    "CaseMetrics",
    "DatasetSummary",
    "aggregate_by_group",
    "case_statistics",
    "dataset_aggregate",
    "euclidean_tre",
    "relative_tre",
    "robustness",
    "AdapterSpec",
    "ExecutionOutcome",
    "calibrate_machine_factor",
    "execute_registration",
    "execute_with_timeout",
    "load_adapter_spec",
    "normalize_time",
    "render_command",
]
