from __future__ import annotations

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from regbench.dataset import (
    ImageGeometry,
    LandmarkSet,
    RegistrationCase,
    generate_pairs,
    load_manifest,
    load_pairing_table,
    parse_landmark_file,
    read_image_geometry,
    scale_landmarks,
    truncate_to_common,
    write_landmark_file,
    write_pairing_table,
)
from regbench.errors import (
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

from conftest import build_dataset, make_image, make_landmarks


def test_parse_with_imagej_header(tmp_path):
    p = tmp_path / "lm.csv"
    p.write_text(" ,X,Y\n0,12.5,7.25\n1,3.0,4.0\n")
    lm = parse_landmark_file(p)
    assert lm.points.tolist() == [[12.5, 7.25], [3.0, 4.0]]
    assert lm.source_path == p


def test_parse_without_header(tmp_path):
    p = tmp_path / "lm.csv"
    p.write_text("1.0,2.0\n3.5,4.5\n")
    assert parse_landmark_file(p).points.tolist() == [[1.0, 2.0], [3.5, 4.5]]


def test_parse_uses_last_two_columns(tmp_path):
    # extra leading columns (id, label) are ignored
    p = tmp_path / "lm.csv"
    p.write_text("id,label,X,Y\n0,alpha,10,20\n1,beta,30,40\n")
    assert parse_landmark_file(p).points.tolist() == [[10.0, 20.0], [30.0, 40.0]]


def test_parse_skips_blank_lines(tmp_path):
    p = tmp_path / "lm.csv"
    p.write_text("1,2\n\n   \n3,4\n")
    assert len(parse_landmark_file(p)) == 2


def test_parse_keeps_negative_coordinates(tmp_path):
    p = tmp_path / "lm.csv"
    p.write_text("-5.5,3\n2,-0.25\n")
    assert parse_landmark_file(p).points.tolist() == [[-5.5, 3.0], [2.0, -0.25]]


def test_parse_empty_file(tmp_path):
    p = tmp_path / "lm.csv"
    p.write_text("")
    with pytest.raises(EmptyFile):
        parse_landmark_file(p)


def test_parse_header_only_is_empty(tmp_path):
    p = tmp_path / "lm.csv"
    p.write_text(" ,X,Y\n")
    with pytest.raises(EmptyFile):
        parse_landmark_file(p)


def test_parse_single_column(tmp_path):
    p = tmp_path / "lm.csv"
    p.write_text("1.0\n2.0\n")
    with pytest.raises(MissingColumns):
        parse_landmark_file(p)


def test_parse_non_numeric_mid_file(tmp_path):
    p = tmp_path / "lm.csv"
    p.write_text("1,2\n3,oops\n")
    with pytest.raises(MalformedRow):
        parse_landmark_file(p)


def test_parse_non_finite(tmp_path):
    p = tmp_path / "lm.csv"
    p.write_text("1,2\n3,inf\n")
    with pytest.raises(MalformedRow):
        parse_landmark_file(p)


def test_parse_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        parse_landmark_file(tmp_path / "nope.csv")


def test_write_then_parse_is_exact(tmp_path):
    pts = np.array([[0.1, 0.2], [1e-17, 123456.789012345], [-3.25, 7.0]])
    p = tmp_path / "lm.csv"
    write_landmark_file(LandmarkSet(points=pts), p)
    back = parse_landmark_file(p)
    assert (back.points == pts).all()
    assert p.read_text().splitlines()[0] == " ,X,Y"


def test_write_refuses_empty(tmp_path):
    lm = LandmarkSet(points=np.empty((0, 2)))
    with pytest.raises(EmptyInput):
        write_landmark_file(lm, tmp_path / "lm.csv")
    assert not (tmp_path / "lm.csv").exists()


@settings(deadline=None, max_examples=50)
@given(
    st.lists(
        st.tuples(
            st.floats(-1e9, 1e9, allow_nan=False),
            st.floats(-1e9, 1e9, allow_nan=False),
        ),
        min_size=1,
        max_size=40,
    )
)
def test_landmark_roundtrip_property(tmp_path_factory, pts):
    tmp = tmp_path_factory.mktemp("rt")
    original = LandmarkSet(points=np.array(pts, dtype=np.float64))
    write_landmark_file(original, tmp / "lm.csv")
    assert (parse_landmark_file(tmp / "lm.csv").points == original.points).all()


def test_landmarkset_rejects_bad_shapes():
    with pytest.raises(MalformedRow):
        LandmarkSet(points=np.zeros((3, 3)))
    with pytest.raises(MalformedRow):
        LandmarkSet(points=np.array([[1.0, np.nan]]))


def test_landmarkset_is_read_only():
    lm = LandmarkSet(points=np.zeros((2, 2)))
    with pytest.raises(ValueError):
        lm.points[0, 0] = 1.0


def test_geometry_diagonal():
    g = ImageGeometry(width=3, height=4)
    assert g.diagonal == 5.0


def test_geometry_rejects_non_positive():
    with pytest.raises(CorruptHeader):
        ImageGeometry(width=0, height=4)


def test_read_geometry_png_and_jpeg(tmp_path):
    png = make_image(tmp_path / "a.png", width=30, height=40)
    g = read_image_geometry(png)
    assert (g.width, g.height) == (30.0, 40.0)
    jpg = tmp_path / "b.jpg"
    make_image(jpg, width=10, height=10)
    assert read_image_geometry(jpg).width == 10.0


def test_read_geometry_unsupported_format(tmp_path):
    from PIL import Image

    bmp = tmp_path / "c.bmp"
    Image.new("RGB", (5, 5)).save(bmp)
    with pytest.raises(UnsupportedFormat):
        read_image_geometry(bmp)


def test_read_geometry_corrupt(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image at all")
    with pytest.raises(CorruptHeader):
        read_image_geometry(bad)


def test_scale_landmarks():
    lm = LandmarkSet(points=np.array([[2.0, 4.0]]))
    assert scale_landmarks(lm, 0.5).points.tolist() == [[1.0, 2.0]]
    with pytest.raises(NonPositiveFactor):
        scale_landmarks(lm, 0.0)


def test_truncate_to_common(caplog):
    a = LandmarkSet(points=np.arange(10.0).reshape(5, 2))
    b = LandmarkSet(points=np.arange(6.0).reshape(3, 2))
    ta, tb = truncate_to_common(a, b)
    assert len(ta) == len(tb) == 3
    assert (ta.points == a.points[:3]).all()
    same_a, same_b = truncate_to_common(a, a)
    assert same_a is a and same_b is a


def test_truncate_rejects_empty():
    full = LandmarkSet(points=np.zeros((2, 2)))
    empty = LandmarkSet(points=np.empty((0, 2)))
    with pytest.raises(EmptyInput):
        truncate_to_common(full, empty)


def test_case_rejects_self_pair(tmp_path):
    with pytest.raises(ManifestError):
        RegistrationCase(
            case_id=0,
            fixed_image=tmp_path / "a.png",
            moving_image=tmp_path / "a.png",
            fixed_landmarks=None,
            moving_landmarks=None,
        )


def test_load_manifest_resolves_relative_paths(tmp_path):
    manifest = build_dataset(tmp_path / "d", n_samples=1, images_per_sample=2)
    samples = load_manifest(manifest)
    assert len(samples) == 1
    image, landmarks, stain = samples[0].images[0]
    assert image.is_absolute() or image.exists()
    assert image.exists() and landmarks.exists()
    assert stain == "st0"
    assert samples[0].scale_for("full") == 100.0


def test_load_manifest_errors(tmp_path):
    p = tmp_path / "m.yaml"
    p.write_text("not a mapping")
    with pytest.raises(ManifestError):
        load_manifest(p)
    p.write_text("samples: []")
    with pytest.raises(ManifestError):
        load_manifest(p)
    p.write_text(yaml.safe_dump({"samples": [{"name": "x", "images": []}]}))
    with pytest.raises(ManifestError):
        load_manifest(p)
    p.write_text(yaml.safe_dump(
        {"samples": [{"name": "x", "images": [{"image": "a.png"}]}]}))
    with pytest.raises(ManifestError):
        load_manifest(p)
    p.write_text(yaml.safe_dump(
        {"samples": [{"name": "x", "scales": {"full": -1},
                      "images": [{"image": "a.png", "landmarks": "a.csv"}]}]}))
    with pytest.raises(ManifestError):
        load_manifest(p)


def test_manifest_explicit_geometry(tmp_path):
    p = tmp_path / "m.yaml"
    p.write_text(yaml.safe_dump({
        "samples": [{
            "name": "s", "tissue": "t",
            "images": [{"image": "a.tiff", "landmarks": "a.csv",
                        "width": 16000, "height": 12000}],
        }]
    }))
    sample = load_manifest(p)[0]
    geom = sample.geometry_per_image[str(tmp_path / "a.tiff")]
    assert geom.width == 16000.0 and geom.height == 12000.0


def test_scale_for_missing_scope():
    from regbench.dataset import SampleManifest

    m = SampleManifest(sample_name="s", tissue_type="t", images=(),
                       scale_percent_per_scope={"10k": 50.0})
    assert m.scale_for("10k") == 50.0
    with pytest.raises(ManifestError):
        m.scale_for("full")


def test_generate_pairs_counts_and_order(tmp_path):
    manifest = build_dataset(tmp_path / "d", n_samples=2, images_per_sample=4)
    cases = generate_pairs(load_manifest(manifest), "full")
    # 2 samples x C(4,2) unordered pairs, no mirrors
    assert len(cases) == 2 * 6
    assert [c.case_id for c in cases] == list(range(12))
    first = cases[0]
    assert first.fixed_image.name == "s0_img0.png"
    assert first.moving_image.name == "s0_img1.png"
    assert first.scope == "full"
    keys = {(str(c.fixed_image), str(c.moving_image)) for c in cases}
    assert len(keys) == 12
    for fixed, moving in keys:
        assert (moving, fixed) not in keys  # mirrored pair never emitted


def test_generate_pairs_duplicate_image(tmp_path):
    from regbench.dataset import SampleManifest

    m = SampleManifest(
        sample_name="s", tissue_type="t",
        images=((tmp_path / "a.png", tmp_path / "a.csv", ""),
                (tmp_path / "a.png", tmp_path / "b.csv", "")),
    )
    with pytest.raises(DuplicateImageInSample):
        generate_pairs([m], "full")


def test_pairing_table_roundtrip(tmp_path):
    manifest = build_dataset(tmp_path / "d", n_samples=1, images_per_sample=3)
    cases = generate_pairs(load_manifest(manifest), "full")
    table = tmp_path / "pairs.csv"
    write_pairing_table(cases, table)
    back = load_pairing_table(table)
    assert len(back) == len(cases)
    for orig, loaded in zip(cases, back):
        assert loaded.case_id == orig.case_id
        assert str(loaded.fixed_image) == str(orig.fixed_image)
        assert str(loaded.moving_image) == str(orig.moving_image)
        assert loaded.tissue_type == orig.tissue_type
        assert loaded.sample_name == orig.sample_name
        assert loaded.scope == orig.scope
        assert not loaded.visual_only


def test_pairing_table_visual_only(tmp_path):
    table = tmp_path / "pairs.csv"
    table.write_text(
        "Target image,Source image,Target landmarks,Source landmarks\n"
        "a.png,b.png,,\n"
        "a.png,c.png,a.csv,c.csv\n"
    )
    cases = load_pairing_table(table)
    assert cases[0].visual_only
    assert not cases[1].visual_only


def test_pairing_table_missing_required_column(tmp_path):
    table = tmp_path / "pairs.csv"
    table.write_text("Target image,Target landmarks\na.png,a.csv\n")
    with pytest.raises(MissingRequiredColumn):
        load_pairing_table(table)


def test_pairing_table_strict_paths(tmp_path):
    table = tmp_path / "pairs.csv"
    table.write_text(
        "Target image,Source image,Target landmarks,Source landmarks\n"
        "a.png,b.png,,\n"
    )
    with pytest.raises(NonexistentPath):
        load_pairing_table(table, strict=True)
    assert len(load_pairing_table(table, strict=False)) == 1


def test_pairing_table_mirror_kept_with_warning(tmp_path, caplog):
    table = tmp_path / "pairs.csv"
    table.write_text(
        "Target image,Source image,Target landmarks,Source landmarks\n"
        "a.png,b.png,,\n"
        "b.png,a.png,,\n"
    )
    with caplog.at_level("WARNING"):
        cases = load_pairing_table(table)
    assert len(cases) == 2
    assert any("mirror" in r.message for r in caplog.records)


def test_pairing_table_geometry_columns(tmp_path):
    table = tmp_path / "pairs.csv"
    table.write_text(
        "Target image,Source image,Target landmarks,Source landmarks,"
        "Tissue,Sample,Scope,Scale percent,Target width,Target height\n"
        "a.png,b.png,a.csv,b.csv,lung,s1,10k,25,16000,12000\n"
    )
    case = load_pairing_table(table)[0]
    assert case.fixed_geometry.width == 16000.0
    assert case.scale_percent == 25.0
    assert case.tissue_type == "lung"
    assert case.scope == "10k"
