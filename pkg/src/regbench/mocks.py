"""Mock registration methods with known ground truth.

Each mock behaves like a real external method: it is invoked as a
subprocess (``python -m regbench.mocks <kind> ...``), reads landmark files,
and writes warped landmarks where told to. That keeps the execution,
timeout and failure paths honest while the expected metrics stay exactly
computable.

Kinds:
  identity  warped := moving landmarks (no registration happened)
  oracle    warped := fixed landmarks (perfect registration)
  jitter    warped := fixed + Gaussian noise, seeded per case
  affine    warped := moving @ A.T + t for a fixed affine map
  crash     exits nonzero without producing output
  hang      sleeps until killed
"""

from __future__ import annotations

import argparse
import shlex
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .dataset import LandmarkSet, parse_landmark_file, write_landmark_file
from .errors import ContractViolation

MOCK_KINDS = ("identity", "oracle", "jitter", "affine", "crash", "hang")

DEFAULT_MATRIX = ((0.98, -0.02), (0.02, 0.98))
DEFAULT_OFFSET = (1.5, -2.0)
CRASH_EXIT_CODE = 3


def run_mock(
    kind: str,
    fixed: LandmarkSet | None,
    moving: LandmarkSet | None,
    case_id: int = 0,
    *,
    sigma: float = 1.0,
    seed: int = 0,
    matrix=DEFAULT_MATRIX,
    offset=DEFAULT_OFFSET,
) -> LandmarkSet:
    """Compute a mock's warped landmarks in-process."""
    if kind == "crash":
        raise SystemExit(CRASH_EXIT_CODE)
    if kind == "identity":
        return LandmarkSet(points=moving.points)
    if kind == "oracle":
        return LandmarkSet(points=fixed.points)
    if kind == "jitter":
        # Seed folds in the case id so every case gets its own stream but
        # reruns reproduce it exactly.
        rng = np.random.default_rng([seed, case_id])
        noisy = fixed.points + rng.normal(0.0, sigma, size=fixed.points.shape)
        return LandmarkSet(points=noisy)
    if kind == "affine":
        m = np.asarray(matrix, dtype=np.float64).reshape(2, 2)
        t = np.asarray(offset, dtype=np.float64).reshape(2)
        return LandmarkSet(points=moving.points @ m.T + t)
    raise ContractViolation(f"unknown mock kind {kind!r}")


def write_mock_adapter_spec(
    path: Path | str,
    kind: str,
    *,
    sigma: float | None = None,
    seed: int = 0,
    sleep: float = 0.0,
    method_name: str | None = None,
) -> Path:
    """Write an adapter spec file that drives one of the mocks."""
    if kind not in MOCK_KINDS:
        raise ContractViolation(f"unknown mock kind {kind!r}")
    path = Path(path)
    py = shlex.quote(sys.executable)
    cmd = (
        f"{py} -m regbench.mocks {kind}"
        " --fixed-landmarks {fixed_landmarks}"
        " --moving-landmarks {moving_landmarks}"
        " --out {workspace}/warped.csv"
        " --case-id {case_id}"
        f" --seed {seed}"
    )
    if sigma is not None:
        cmd += f" --sigma {sigma}"
    if sleep > 0:
        cmd += f" --sleep {sleep}"
    doc = {
        "method_name": method_name or f"mock-{kind}",
        "execute_commands": [cmd],
        "warped_landmarks": "{workspace}/warped.csv",
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
    return path


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="python -m regbench.mocks",
        description="mock registration methods for harness testing",
    )
    parser.add_argument("kind", choices=MOCK_KINDS)
    parser.add_argument("--fixed-landmarks", type=Path)
    parser.add_argument("--moving-landmarks", type=Path)
    parser.add_argument("--out", type=Path)
    parser.add_argument("--case-id", type=int, default=0)
    parser.add_argument("--sigma", type=float, default=1.0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--sleep", type=float, default=0.0,
                        help="seconds to sleep before acting")
    args = parser.parse_args(argv)

    if args.kind == "hang":
        while True:
            time.sleep(3600)
    if args.sleep > 0:
        time.sleep(args.sleep)
    if args.kind == "crash":
        print("simulated crash", file=sys.stderr)
        return CRASH_EXIT_CODE

    if args.out is None:
        parser.error("--out is required")
    fixed = parse_landmark_file(args.fixed_landmarks) if args.fixed_landmarks else None
    moving = parse_landmark_file(args.moving_landmarks) if args.moving_landmarks else None
    warped = run_mock(
        args.kind, fixed, moving, args.case_id, sigma=args.sigma, seed=args.seed
    )
    write_landmark_file(warped, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
