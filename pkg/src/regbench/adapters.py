"""Bridge between the harness and external registration methods.

A method is wrapped by an adapter spec: command templates for an optional
preparation stage and the registration itself, a path template locating the
warped landmarks the method must emit, cleanup globs, and environment
overrides. Commands are argument vectors, never shell strings; placeholders
are substituted per token, so paths with spaces survive.
"""

from __future__ import annotations

import logging
import os
import re
import shlex
import signal
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import status
from .dataset import LandmarkSet, parse_landmark_file
from .errors import (
    AdapterSpecError,
    ContractViolation,
    EmptyFile,
    IoFailure,
    MalformedOutput,
    MalformedRow,
    MissingColumns,
    MissingOutput,
    NonPositiveFactor,
    UnknownPlaceholder,
    UnsupportedFormat,
)

log = logging.getLogger(__name__)

PLACEHOLDERS = frozenset(
    {
        "fixed_image",
        "moving_image",
        "fixed_landmarks",
        "moving_landmarks",
        "workspace",
        "case_id",
        "method_config",
    }
)

PREPROCESS_MODES = ("none", "grayscale", "channel-normalize")

STDOUT_NAME = "stdout.txt"
STDERR_NAME = "stderr.txt"

DEFAULT_TIMEOUT_S = 10800.0  # 3 h hard limit per registration
DEFAULT_GRACE_S = 5.0

_PLACEHOLDER_RE = re.compile(r"\{([^{}]*)\}")

# Wall seconds the reference machine spends on the calibration probe
# (fixed-size matrix multiply); local factor = reference / measured.
REFERENCE_PROBE_SECONDS = 0.012


@dataclass(frozen=True)
class AdapterSpec:
    """Declarative wrapper around one external registration method."""

    method_name: str
    execute_commands: tuple[str, ...]
    warped_landmarks_template: str
    prepare_commands: tuple[str, ...] = ()
    cleanup_globs: tuple[str, ...] = ()
    environment_overrides: dict[str, str] = field(default_factory=dict)
    preprocessing: str = "none"
    method_config: Path | None = None

    def __post_init__(self):
        if not self.execute_commands:
            raise AdapterSpecError(f"{self.method_name}: at least one execute command required")
        if self.preprocessing not in PREPROCESS_MODES:
            raise AdapterSpecError(
                f"{self.method_name}: unknown preprocessing mode {self.preprocessing!r}"
            )
        for template in (*self.prepare_commands, *self.execute_commands,
                         self.warped_landmarks_template):
            _check_placeholders(template)


@dataclass(frozen=True)
class ExecutionOutcome:
    """Result of running one case's registration commands."""

    status: str
    exit_code: int | None
    wall_time_s: float
    normalized_time_s: float
    stdout_path: Path
    stderr_path: Path


def load_adapter_spec(path: Path | str) -> AdapterSpec:
    """Load an adapter spec file (YAML document)."""
    path = Path(path)
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read adapter spec {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise AdapterSpecError(f"{path}: invalid adapter spec: {exc}") from exc
    if not isinstance(doc, dict):
        raise AdapterSpecError(f"{path}: adapter spec must be a mapping")
    try:
        method_name = str(doc["method_name"])
        execute = tuple(str(c) for c in doc["execute_commands"])
        warped = str(doc["warped_landmarks"])
    except KeyError as exc:
        raise AdapterSpecError(f"{path}: missing required field {exc.args[0]!r}") from None
    method_config = doc.get("method_config")
    if method_config is not None:
        method_config = Path(method_config)
        if not method_config.is_absolute():
            method_config = path.parent / method_config
    return AdapterSpec(
        method_name=method_name,
        execute_commands=execute,
        warped_landmarks_template=warped,
        prepare_commands=tuple(str(c) for c in doc.get("prepare_commands") or ()),
        cleanup_globs=tuple(str(g) for g in doc.get("cleanup") or ()),
        environment_overrides={str(k): str(v) for k, v in (doc.get("environment") or {}).items()},
        preprocessing=str(doc.get("preprocessing", "none")),
        method_config=method_config,
    )


def _check_placeholders(template: str) -> None:
    for name in _PLACEHOLDER_RE.findall(template):
        if name not in PLACEHOLDERS:
            raise UnknownPlaceholder(
                f"unknown placeholder {{{name}}} in template {template!r}; "
                f"known: {sorted(PLACEHOLDERS)}"
            )


def render_command(
    template: str,
    case,
    workspace: Path | str,
    method_config: Path | str | None = None,
) -> list[str]:
    """Substitute placeholders into a command template, yielding an argv.

    Path values are rendered absolute. The template is tokenized first, so
    substituted values containing spaces stay single arguments.
    """
    values = _placeholder_values(case, workspace, method_config)
    return [_substitute(token, values) for token in shlex.split(template)]


def render_path(
    template: str,
    case,
    workspace: Path | str,
    method_config: Path | str | None = None,
) -> Path:
    """Substitute placeholders into a path template."""
    values = _placeholder_values(case, workspace, method_config)
    return Path(_substitute(template, values))


def _placeholder_values(case, workspace, method_config) -> dict[str, str | None]:
    def absolute(p):
        return str(Path(p).resolve()) if p is not None else None

    return {
        "fixed_image": absolute(case.fixed_image),
        "moving_image": absolute(case.moving_image),
        "fixed_landmarks": absolute(case.fixed_landmarks),
        "moving_landmarks": absolute(case.moving_landmarks),
        "workspace": absolute(workspace),
        "case_id": str(case.case_id),
        "method_config": absolute(method_config),
    }


def _substitute(text: str, values: dict[str, str | None]) -> str:
    def repl(match: re.Match) -> str:
        name = match.group(1)
        if name not in values:
            raise UnknownPlaceholder(
                f"unknown placeholder {{{name}}}; known: {sorted(values)}"
            )
        value = values[name]
        if value is None:
            raise UnknownPlaceholder(f"placeholder {{{name}}} has no value for this case")
        return value

    return _PLACEHOLDER_RE.sub(repl, text)


def execute_with_timeout(
    cmd: list[str],
    limit: float,
    workspace: Path | str,
    *,
    grace: float = DEFAULT_GRACE_S,
    env_overrides: dict[str, str] | None = None,
    machine_factor: float = 1.0,
) -> ExecutionOutcome:
    """Run one command, killing its whole process tree at the time limit.

    stdout/stderr are appended to stdout.txt / stderr.txt in the workspace.
    A missing binary is recorded as a failed outcome, not raised.
    """
    if limit <= 0:
        raise ContractViolation(f"timeout limit must be > 0, got {limit}")
    workspace = Path(workspace)
    stdout_path = workspace / STDOUT_NAME
    stderr_path = workspace / STDERR_NAME
    env = dict(os.environ)
    if env_overrides:
        env.update(env_overrides)

    start = time.monotonic()
    with open(stdout_path, "ab") as out_fh, open(stderr_path, "ab") as err_fh:
        try:
            proc = subprocess.Popen(
                cmd,
                stdout=out_fh,
                stderr=err_fh,
                cwd=workspace,
                env=env,
                start_new_session=True,  # own process group, killable as a tree
            )
        except OSError as exc:
            err_fh.write(f"spawn failure: {exc}\n".encode())
            return ExecutionOutcome(
                status=status.FAILED,
                exit_code=None,
                wall_time_s=0.0,
                normalized_time_s=0.0,
                stdout_path=stdout_path,
                stderr_path=stderr_path,
            )
        timed_out = False
        try:
            proc.wait(timeout=limit)
        except subprocess.TimeoutExpired:
            timed_out = True
            _kill_process_tree(proc, grace)
            err_fh.write(f"terminated: exceeded time limit of {limit} s\n".encode())

    wall = time.monotonic() - start
    if timed_out:
        outcome_status, exit_code = status.TIMEOUT, proc.returncode
    elif proc.returncode == 0:
        outcome_status, exit_code = status.COMPLETED, 0
    else:
        outcome_status, exit_code = status.FAILED, proc.returncode
    return ExecutionOutcome(
        status=outcome_status,
        exit_code=exit_code,
        wall_time_s=wall,
        normalized_time_s=normalize_time(wall, machine_factor),
        stdout_path=stdout_path,
        stderr_path=stderr_path,
    )


def _kill_process_tree(proc: subprocess.Popen, grace: float) -> None:
    """SIGTERM the process group, escalate to SIGKILL within the grace window."""
    try:
        pgid = os.getpgid(proc.pid)
    except (OSError, AttributeError):
        pgid = None
    try:
        if pgid is not None:
            os.killpg(pgid, signal.SIGTERM)
        else:
            proc.terminate()
        proc.wait(timeout=max(grace / 2, 0.1))
    except subprocess.TimeoutExpired:
        pass
    except ProcessLookupError:
        return
    if proc.poll() is None:
        try:
            if pgid is not None:
                os.killpg(pgid, signal.SIGKILL)
            else:
                proc.kill()
        except ProcessLookupError:
            return
        proc.wait()


def execute_registration(
    spec: AdapterSpec,
    case,
    workspace: Path | str,
    *,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    machine_factor: float = 1.0,
    grace: float = DEFAULT_GRACE_S,
) -> ExecutionOutcome:
    """Run a case's prepare and execute commands under one time budget.

    Only the execute stage counts as measured registration time. The budget
    spans the whole case: later commands get whatever time remains.
    """
    workspace = Path(workspace)
    for template in spec.prepare_commands:
        cmd = render_command(template, case, workspace, spec.method_config)
        outcome = execute_with_timeout(
            cmd, timeout_s, workspace, grace=grace,
            env_overrides=spec.environment_overrides, machine_factor=machine_factor,
        )
        if outcome.status != status.COMPLETED:
            return ExecutionOutcome(
                status=outcome.status,
                exit_code=outcome.exit_code,
                wall_time_s=0.0,
                normalized_time_s=0.0,
                stdout_path=outcome.stdout_path,
                stderr_path=outcome.stderr_path,
            )

    total_wall = 0.0
    last = None
    for template in spec.execute_commands:
        remaining = timeout_s - total_wall
        if remaining <= 0:
            last = ExecutionOutcome(
                status=status.TIMEOUT,
                exit_code=None,
                wall_time_s=0.0,
                normalized_time_s=0.0,
                stdout_path=workspace / STDOUT_NAME,
                stderr_path=workspace / STDERR_NAME,
            )
            total_wall = timeout_s
            break
        cmd = render_command(template, case, workspace, spec.method_config)
        last = execute_with_timeout(
            cmd, remaining, workspace, grace=grace,
            env_overrides=spec.environment_overrides, machine_factor=machine_factor,
        )
        total_wall += last.wall_time_s
        if last.status != status.COMPLETED:
            break
    assert last is not None
    return ExecutionOutcome(
        status=last.status,
        exit_code=last.exit_code,
        wall_time_s=total_wall,
        normalized_time_s=normalize_time(total_wall, machine_factor),
        stdout_path=last.stdout_path,
        stderr_path=last.stderr_path,
    )


def extract_warped_landmarks(spec: AdapterSpec, case, workspace: Path | str) -> LandmarkSet:
    """Read the warped landmarks the method was required to emit."""
    path = render_path(spec.warped_landmarks_template, case, workspace, spec.method_config)
    if not path.exists():
        raise MissingOutput(f"{spec.method_name}: no warped landmarks at {path}")
    try:
        return parse_landmark_file(path)
    except (MalformedRow, EmptyFile, MissingColumns, IoFailure) as exc:
        raise MalformedOutput(f"{spec.method_name}: unusable warped landmarks: {exc}") from exc


def cleanup_workspace(spec: AdapterSpec, case, workspace: Path | str,
                      keep_debug: bool = False) -> None:
    """Remove temporary files matching the spec's cleanup globs.

    The warped landmarks, captured stdout/stderr and any rendered overlay
    are always retained. Removal errors are logged, never raised.
    """
    if keep_debug or not spec.cleanup_globs:
        return
    workspace = Path(workspace)
    protected = {
        (workspace / STDOUT_NAME).resolve(),
        (workspace / STDERR_NAME).resolve(),
        (workspace / "overlay.svg").resolve(),
    }
    try:
        protected.add(
            render_path(spec.warped_landmarks_template, case, workspace,
                        spec.method_config).resolve()
        )
    except UnknownPlaceholder:
        pass
    for pattern in spec.cleanup_globs:
        for match in sorted(workspace.glob(pattern)):
            if match.resolve() in protected or not match.is_file():
                continue
            try:
                match.unlink()
            except OSError as exc:
                log.warning("cleanup: could not remove %s: %s", match, exc)


def normalize_time(wall_time_s: float, machine_factor: float) -> float:
    """Scale measured wall time to a reference machine."""
    if machine_factor <= 0:
        raise NonPositiveFactor(f"machine factor must be > 0, got {machine_factor}")
    return wall_time_s * machine_factor


def calibrate_machine_factor(
    reference_seconds: float = REFERENCE_PROBE_SECONDS, size: int = 512, repeats: int = 5
) -> float:
    """Estimate the machine factor from a fixed-size matrix-multiply probe.

    The probe's best-of-n wall time is compared against the stored reference
    constant; a machine twice as fast as the reference yields factor 2.0
    (its measured times are doubled to express them in reference time).
    """
    rng = np.random.default_rng(0)
    a = rng.standard_normal((size, size))
    b = rng.standard_normal((size, size))
    a @ b  # warm-up
    best = min(_time_once(a, b) for _ in range(repeats))
    return reference_seconds / best


def _time_once(a: np.ndarray, b: np.ndarray) -> float:
    start = time.perf_counter()
    a @ b
    return time.perf_counter() - start


def preprocess_image(path: Path | str, mode: str, workspace: Path | str) -> Path:
    """Optionally derive a preprocessed copy of an image inside the workspace.

    Mode "none" returns the input path without touching the filesystem.
    "grayscale" writes a single-channel luminance copy (0.299/0.587/0.114).
    "channel-normalize" affinely maps each channel to mean 128 / std 32,
    clipped to [0, 255]; a constant channel (zero std) is left unchanged.
    """
    if mode == "none":
        return Path(path)
    if mode not in PREPROCESS_MODES:
        raise UnsupportedFormat(f"unknown preprocessing mode {mode!r}")
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    workspace = Path(workspace)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise UnsupportedFormat(f"{path}: cannot read image for preprocessing: {exc}") from exc

    if mode == "grayscale":
        out = arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114
        tag = "gray"
    else:
        out = arr.copy()
        for c in range(3):
            std = out[..., c].std()
            if std > 0:
                out[..., c] = (out[..., c] - out[..., c].mean()) / std * 32.0 + 128.0
        tag = "cnorm"
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)

    suffix = path.suffix if path.suffix.lower() in (".png", ".jpg", ".jpeg") else ".png"
    dest = workspace / f"{path.stem}-{tag}{suffix}"
    n = 1
    while dest.exists():
        dest = workspace / f"{path.stem}-{tag}.{n}{suffix}"
        n += 1
    Image.fromarray(out).save(dest)
    return dest
