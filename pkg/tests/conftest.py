"""Shared builders for synthetic datasets small enough to run in-process."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import yaml
from PIL import Image

from regbench.dataset import (
    LandmarkSet,
    generate_pairs,
    load_manifest,
    write_landmark_file,
    write_pairing_table,
)


def make_image(path: Path, width: int = 80, height: int = 60, seed: int = 0) -> Path:
    rng = np.random.default_rng(seed)
    Image.fromarray(rng.integers(0, 256, (height, width, 3), dtype=np.uint8)).save(path)
    return path


def make_landmarks(path: Path, points) -> Path:
    write_landmark_file(LandmarkSet(points=np.asarray(points, dtype=np.float64)), path)
    return path


def build_dataset(
    root: Path,
    *,
    n_samples: int = 2,
    images_per_sample: int = 3,
    n_landmarks: int = 8,
    width: int = 80,
    height: int = 60,
    seed: int = 1234,
    scales: dict[str, float] | None = None,
) -> Path:
    """Write images, landmark files and a manifest; return the manifest path."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    samples = []
    for s in range(n_samples):
        images = []
        for i in range(images_per_sample):
            img = make_image(root / f"s{s}_img{i}.png", width, height,
                             seed=seed + 100 * s + i)
            pts = rng.uniform(5, min(width, height) - 5, size=(n_landmarks, 2))
            lnd = make_landmarks(root / f"s{s}_img{i}.csv", pts)
            images.append({"image": img.name, "landmarks": lnd.name, "stain": f"st{i}"})
        samples.append(
            {
                "name": f"sample{s}",
                "tissue": f"tissue{s % 2}",
                "scales": scales or {"full": 100},
                "images": images,
            }
        )
    manifest = root / "manifest.yaml"
    manifest.write_text(yaml.safe_dump({"samples": samples}))
    return manifest


def build_pairs_csv(root: Path, scope: str = "full", **kwargs) -> Path:
    """Dataset plus its expanded pairing table; returns the table path."""
    manifest = build_dataset(root, **kwargs)
    cases = generate_pairs(load_manifest(manifest), scope)
    pairs = root / "pairs.csv"
    write_pairing_table(cases, pairs)
    return pairs


@pytest.fixture
def tiny_pairs(tmp_path) -> Path:
    """Six metric-bearing cases (2 samples x 3 images) on disk."""
    return build_pairs_csv(tmp_path / "data")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(99)


# Scoreboard lines collected by the acceptance suite; echoed after the run
# so they survive output capture.
acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
