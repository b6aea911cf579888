"""Landmark files, image geometry, dataset manifests and pair generation.

Landmark CSV convention (ImageJ-style): an optional header row whose last
two columns are X and Y, then one row per point. A leading unnamed index
column is accepted and ignored; the last two columns of every data row are
taken as the coordinates. Row order is semantic: row i across the files of
one tissue sample marks the same biological structure, with the origin at
the image's top-left corner.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .errors import (
    CorruptHeader,
    DuplicateImageInSample,
    EmptyFile,
    EmptyInput,
    IoFailure,
    MalformedRow,
    ManifestError,
    MissingColumns,
    MissingRequiredColumn,
    NonexistentPath,
    NonPositiveFactor,
    UnsupportedFormat,
)

log = logging.getLogger(__name__)

LANDMARK_HEADER = (" ", "X", "Y")

PAIRING_REQUIRED_COLUMNS = (
    "Target image",
    "Source image",
    "Target landmarks",
    "Source landmarks",
)
# Extra columns written by pair generation so grouping metadata survives the
# CSV round trip; the loader uses them when present.
PAIRING_OPTIONAL_COLUMNS = (
    "Tissue",
    "Sample",
    "Scope",
    "Scale percent",
    "Target width",
    "Target height",
)


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Ordered 2D points; row index is the cross-image correspondence key."""

    points: np.ndarray
    source_path: Path | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise MalformedRow(f"landmark array must be (n, 2), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise MalformedRow("landmark coordinates must be finite")
        pts = np.ascontiguousarray(pts)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class ImageGeometry:
    """Pixel dimensions of an image; diagonal normalizes registration error."""

    width: float
    height: float
    diagonal: float = field(init=False)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise CorruptHeader(f"non-positive image size {self.width}x{self.height}")
        object.__setattr__(self, "diagonal", math.hypot(self.width, self.height))


@dataclass(frozen=True)
class RegistrationCase:
    """One fixed/moving image pair with its landmark files and tags."""

    case_id: int
    fixed_image: Path
    moving_image: Path
    fixed_landmarks: Path | None
    moving_landmarks: Path | None
    tissue_type: str = ""
    sample_name: str = ""
    scope: str = ""
    scale_percent: float = 100.0
    fixed_geometry: ImageGeometry | None = None
    visual_only: bool = False

    def __post_init__(self):
        if Path(self.fixed_image) == Path(self.moving_image):
            raise ManifestError(f"case {self.case_id}: fixed and moving image are identical")


@dataclass(frozen=True)
class SampleManifest:
    """One tissue sample: serial sections of a specimen, each stained differently."""

    sample_name: str
    tissue_type: str
    images: tuple[tuple[Path, Path, str], ...]  # (image, landmarks, stain)
    scale_percent_per_scope: dict[str, float] = field(default_factory=dict)
    geometry_per_image: dict[str, ImageGeometry] = field(default_factory=dict)

    def scale_for(self, scope: str) -> float:
        if not self.scale_percent_per_scope:
            return 100.0
        try:
            return self.scale_percent_per_scope[scope]
        except KeyError:
            raise ManifestError(
                f"sample {self.sample_name!r} defines no scale for scope {scope!r}"
            ) from None


def parse_landmark_file(path: Path | str) -> LandmarkSet:
    """Read a landmark CSV, tolerating a header row and an index column."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if any(cell.strip() for cell in r)]
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    points: list[tuple[float, float]] = []
    for i, row in enumerate(rows):
        if len(row) < 2:
            raise MissingColumns(f"{path}:{i + 1}: expected at least 2 columns, got {len(row)}")
        try:
            x, y = float(row[-2]), float(row[-1])
        except ValueError:
            if i == 0:
                continue  # header row
            raise MalformedRow(f"{path}:{i + 1}: non-numeric coordinate in {row!r}") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise MalformedRow(f"{path}:{i + 1}: non-finite coordinate in {row!r}")
        points.append((x, y))

    if not points:
        raise EmptyFile(f"{path}: no landmark rows")
    return LandmarkSet(np.array(points, dtype=np.float64), source_path=path)


def write_landmark_file(landmarks: LandmarkSet, path: Path | str) -> None:
    """Write a landmark CSV (index column, X, Y) parseable by parse_landmark_file."""
    if len(landmarks) == 0:
        raise EmptyInput("refusing to write an empty landmark file")
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LANDMARK_HEADER)
            for i, (x, y) in enumerate(landmarks.points):
                # repr round-trips float64 exactly
                writer.writerow([i, repr(float(x)), repr(float(y))])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_image_geometry(path: Path | str) -> ImageGeometry:
    """Read width/height from a PNG or JPEG header without decoding pixels."""
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    try:
        with Image.open(path) as im:  # lazy: header only, no pixel decode
            fmt = im.format
            width, height = im.size
    except UnidentifiedImageError as exc:
        raise CorruptHeader(f"{path}: unrecognized or corrupt image header") from exc
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if fmt not in ("PNG", "JPEG"):
        raise UnsupportedFormat(
            f"{path}: format {fmt} not supported for header-only geometry; "
            "supply explicit width/height in the manifest"
        )
    return ImageGeometry(width=float(width), height=float(height))


def scale_landmarks(landmarks: LandmarkSet, factor: float) -> LandmarkSet:
    """Multiply every coordinate by a positive factor, preserving order."""
    if factor <= 0:
        raise NonPositiveFactor(f"scale factor must be > 0, got {factor}")
    return LandmarkSet(landmarks.points * float(factor), source_path=landmarks.source_path)


def truncate_to_common(fixed: LandmarkSet, other: LandmarkSet) -> tuple[LandmarkSet, LandmarkSet]:
    """Truncate both sets to their common prefix; correspondence starts at row 0."""
    if len(fixed) == 0 or len(other) == 0:
        raise EmptyInput("cannot truncate an empty landmark set")
    n = min(len(fixed), len(other))
    if len(fixed) != len(other):
        log.warning(
            "landmark count mismatch (%d vs %d), truncating to first %d rows (%s / %s)",
            len(fixed), len(other), n, fixed.source_path, other.source_path,
        )
    if n == len(fixed) and n == len(other):
        return fixed, other
    return (
        LandmarkSet(fixed.points[:n], source_path=fixed.source_path),
        LandmarkSet(other.points[:n], source_path=other.source_path),
    )


def load_manifest(path: Path | str) -> list[SampleManifest]:
    """Load a dataset manifest (YAML/JSON document) describing tissue samples.

    Schema::

        samples:
          - name: lung-lesion_1
            tissue: lung-lesion
            scales: {10k: 50, full: 100}     # percent per scope, optional
            images:
              - image: rel/or/abs/path.png
                landmarks: rel/or/abs/path.csv
                stain: HE
                width: 16000                  # optional, for non-PNG/JPEG images
                height: 12000

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ManifestError(f"{path}: invalid manifest: {exc}") from exc

    if not isinstance(doc, dict) or not isinstance(doc.get("samples"), list):
        raise ManifestError(f"{path}: manifest must be a mapping with a 'samples' list")
    if not doc["samples"]:
        raise ManifestError(f"{path}: manifest lists no samples")

    base = path.parent
    manifests = []
    for entry in doc["samples"]:
        if not isinstance(entry, dict) or "name" not in entry:
            raise ManifestError(f"{path}: every sample needs a 'name'")
        name = str(entry["name"])
        images_raw = entry.get("images")
        if not images_raw:
            raise ManifestError(f"{path}: sample {name!r} lists no images")
        images = []
        geometry = {}
        for img in images_raw:
            if not isinstance(img, dict) or "image" not in img or "landmarks" not in img:
                raise ManifestError(
                    f"{path}: sample {name!r}: every image needs 'image' and 'landmarks' paths"
                )
            image_path = _resolve(base, img["image"])
            images.append((image_path, _resolve(base, img["landmarks"]), str(img.get("stain", ""))))
            if "width" in img and "height" in img:
                geometry[str(image_path)] = ImageGeometry(
                    width=float(img["width"]), height=float(img["height"])
                )
        scales = {str(k): float(v) for k, v in (entry.get("scales") or {}).items()}
        for scope, pct in scales.items():
            if pct <= 0:
                raise ManifestError(f"{path}: sample {name!r}: scale for {scope!r} must be > 0")
        manifests.append(
            SampleManifest(
                sample_name=name,
                tissue_type=str(entry.get("tissue", "")),
                images=tuple(images),
                scale_percent_per_scope=scales,
                geometry_per_image=geometry,
            )
        )
    return manifests


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def generate_pairs(manifests: list[SampleManifest], scope: str) -> list[RegistrationCase]:
    """Enumerate all within-sample unordered image pairs, mirrors dropped.

    A sample of n images yields n(n-1)/2 cases. Samples are visited in
    manifest order and pairs in lexicographic image-index order, so case ids
    are stable across runs (required by resume). The lower-index image of a
    pair acts as the fixed image.
    """
    cases: list[RegistrationCase] = []
    case_id = 0
    for manifest in manifests:
        seen: set[str] = set()
        for image_path, _, _ in manifest.images:
            key = str(image_path)
            if key in seen:
                raise DuplicateImageInSample(
                    f"sample {manifest.sample_name!r}: duplicate image {image_path}"
                )
            seen.add(key)
        scale = manifest.scale_for(scope)
        n = len(manifest.images)
        for i in range(n):
            for j in range(i + 1, n):
                fixed_img, fixed_lm, _ = manifest.images[i]
                moving_img, moving_lm, _ = manifest.images[j]
                cases.append(
                    RegistrationCase(
                        case_id=case_id,
                        fixed_image=fixed_img,
                        moving_image=moving_img,
                        fixed_landmarks=fixed_lm,
                        moving_landmarks=moving_lm,
                        tissue_type=manifest.tissue_type,
                        sample_name=manifest.sample_name,
                        scope=scope,
                        scale_percent=scale,
                        fixed_geometry=manifest.geometry_per_image.get(str(fixed_img)),
                    )
                )
                case_id += 1
    return cases


def load_pairing_table(path: Path | str, strict: bool = False) -> list[RegistrationCase]:
    """Load an explicit pairing CSV, one case per row, in row order.

    Rows without landmark paths are flagged visual-only (executed, never
    evaluated). Explicit tables are taken literally: mirrored rows are kept
    with a warning. With strict=True, referenced files must exist.
    """
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            fieldnames = reader.fieldnames or []
            for col in ("Target image", "Source image"):
                if col not in fieldnames:
                    raise MissingRequiredColumn(f"{path}: pairing table lacks column {col!r}")
            rows = list(reader)
    except OSError as exc:
        raise IoFailure(f"cannot read pairing table {path}: {exc}") from exc

    base = path.parent
    cases: list[RegistrationCase] = []
    seen_pairs: set[tuple[str, str]] = set()
    for i, row in enumerate(rows):
        fixed_img = _resolve(base, row["Target image"])
        moving_img = _resolve(base, row["Source image"])
        fixed_lm = _optional_path(base, row.get("Target landmarks"))
        moving_lm = _optional_path(base, row.get("Source landmarks"))
        visual_only = fixed_lm is None or moving_lm is None
        if strict:
            for p in (fixed_img, moving_img, fixed_lm, moving_lm):
                if p is not None and not Path(p).exists():
                    raise NonexistentPath(f"{path}: row {i + 1} references missing file {p}")
        pair_key = (str(fixed_img), str(moving_img))
        if (pair_key[1], pair_key[0]) in seen_pairs:
            log.warning(
                "%s: row %d mirrors an earlier pair (%s <-> %s); keeping both",
                path, i + 1, moving_img, fixed_img,
            )
        seen_pairs.add(pair_key)
        geometry = None
        if row.get("Target width") and row.get("Target height"):
            geometry = ImageGeometry(float(row["Target width"]), float(row["Target height"]))
        cases.append(
            RegistrationCase(
                case_id=i,
                fixed_image=fixed_img,
                moving_image=moving_img,
                fixed_landmarks=fixed_lm,
                moving_landmarks=moving_lm,
                tissue_type=row.get("Tissue", "") or "",
                sample_name=row.get("Sample", "") or "",
                scope=row.get("Scope", "") or "",
                scale_percent=float(row["Scale percent"]) if row.get("Scale percent") else 100.0,
                fixed_geometry=geometry,
                visual_only=visual_only,
            )
        )
    return cases


def write_pairing_table(cases: list[RegistrationCase], path: Path | str) -> None:
    """Write cases as a pairing CSV consumable by load_pairing_table."""
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(list(PAIRING_REQUIRED_COLUMNS) + list(PAIRING_OPTIONAL_COLUMNS))
            for case in cases:
                geom = case.fixed_geometry
                writer.writerow(
                    [
                        case.fixed_image,
                        case.moving_image,
                        case.fixed_landmarks or "",
                        case.moving_landmarks or "",
                        case.tissue_type,
                        case.sample_name,
                        case.scope,
                        f"{case.scale_percent:g}",
                        f"{geom.width:g}" if geom else "",
                        f"{geom.height:g}" if geom else "",
                    ]
                )
    except OSError as exc:
        raise IoFailure(f"cannot write pairing table {path}: {exc}") from exc


def _optional_path(base: Path, value) -> Path | None:
    if value is None or not str(value).strip():
        return None
    return _resolve(base, value)


def with_case_geometry(case: RegistrationCase, geometry: ImageGeometry) -> RegistrationCase:
    """Return a copy of the case with its fixed-image geometry filled in."""
    return replace(case, fixed_geometry=geometry)
