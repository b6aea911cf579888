from __future__ import annotations

import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from regbench import status
from regbench.dataset import LandmarkSet
from regbench.errors import EmptyInput, MissingScope
from regbench.metrics import CaseMetrics, DatasetSummary
from regbench.report import (
    OVERLAY_ERROR_COLOR,
    OVERLAY_ESTIMATE_COLOR,
    OVERLAY_TRUE_COLOR,
    empirical_cdf,
    format_ratio_percent,
    render_boxplots,
    render_case_overlay,
    render_radar,
    render_scope_comparison,
    render_summary_table,
    render_tissue_breakdown,
)

SVG = "{http://www.w3.org/2000/svg}"


def summary(method="m", scope="full", med=0.02, rob=0.8, **kw):
    fields = dict(
        method=method, scope=scope,
        avg_median_rtre=med, std_median_rtre=0.01, median_median_rtre=med,
        avg_max_rtre=med * 3, std_max_rtre=0.02,
        avg_robustness=rob, std_robustness=0.1, median_robustness=rob,
        avg_time_min=2.5, std_time_min=0.5, case_count=10, failure_count=1,
    )
    fields.update(kw)
    return DatasetSummary(**fields)


def case_metric(case_id, method, med, mx=None, rob=0.5, scope="full",
                tissue="", time_s=60.0):
    return CaseMetrics(
        case_id=case_id, status=status.COMPLETED,
        initial_median_rtre=0.5, initial_max_rtre=0.9,
        final_median_rtre=med, final_max_rtre=mx if mx is not None else med * 2,
        robustness=rob, landmark_count_used=10,
        wall_time_s=time_s, normalized_time_s=time_s,
        method=method, scope=scope, tissue_type=tissue,
    )


def lm(pts):
    return LandmarkSet(points=np.asarray(pts, dtype=np.float64))


def svg_root(path):
    return ET.parse(path).getroot()


# --- tables ------------------------------------------------------------------

def test_ratio_percent_layout():
    assert format_ratio_percent(0.023) == "2.30"
    assert format_ratio_percent(0.0) == "0.00"
    assert format_ratio_percent(1.0) == "100.00"
    assert format_ratio_percent(float("nan")) == ""


def test_summary_table_csv(tmp_path):
    out = tmp_path / "table.csv"
    render_summary_table([summary(method="worse", med=0.08),
                          summary(method="better", med=0.023)], out)
    lines = out.read_text().splitlines()
    assert lines[0].startswith("method,scope,median_rtre_avg_pct")
    # sorted best-first, ratios as percent
    assert lines[1].startswith("better,full,2.30")
    assert lines[2].startswith("worse,full,8.00")
    assert ",0.800," in lines[1]  # robustness stays a fraction


def test_summary_table_markdown(tmp_path):
    out = tmp_path / "table.md"
    render_summary_table([summary(med=0.023)], out)
    text = out.read_text().splitlines()
    assert text[0].startswith("| method |")
    assert set(text[1].replace("|", "").split()) == {"---"}
    assert "| 2.30 |" in text[2]


def test_empirical_cdf_against_rank_oracle(rng):
    values = rng.uniform(0, 5, 31)
    x, f = empirical_cdf(values)
    assert (np.diff(x) >= 0).all()
    for xi, fi in zip(x, f):
        assert fi == pytest.approx(np.sum(values <= xi) / len(values))
    assert f[-1] == 1.0
    with pytest.raises(EmptyInput):
        empirical_cdf([])


# --- overlay -----------------------------------------------------------------

def test_overlay_three_segments_per_landmark(tmp_path):
    n = 7
    rng = np.random.default_rng(0)
    fixed, moving, warped = (lm(rng.uniform(0, 100, (n, 2))) for _ in range(3))
    out = render_case_overlay(fixed, moving, warped, tmp_path / "o.svg",
                              title="case 0")
    root = svg_root(out)
    lines = root.findall(f".//{SVG}g[@class='landmarks']/{SVG}line")
    assert len(lines) == 3 * n
    by_color = {}
    for el in lines:
        by_color.setdefault(el.get("stroke"), []).append(el)
    assert {OVERLAY_TRUE_COLOR: n, OVERLAY_ESTIMATE_COLOR: n,
            OVERLAY_ERROR_COLOR: n} == {k: len(v) for k, v in by_color.items()}
    # every error segment carries its pixel distance in a tooltip
    titles = [el.findtext(f"{SVG}title") for el in by_color[OVERLAY_ERROR_COLOR]]
    assert all("error" in t for t in titles)


def test_overlay_error_titles_match_geometry(tmp_path):
    fixed = lm([[0, 0], [10, 10]])
    moving = lm([[5, 0], [10, 15]])
    warped = lm([[3, 4], [10, 11]])
    out = render_case_overlay(fixed, moving, warped, tmp_path / "o.svg")
    root = svg_root(out)
    red = [el for el in root.iter(f"{SVG}line")
           if el.get("stroke") == OVERLAY_ERROR_COLOR]
    assert "error 5.000" in red[0].findtext(f"{SVG}title")
    assert "error 1.000" in red[1].findtext(f"{SVG}title")


def test_overlay_rejects_mismatched_or_empty(tmp_path):
    with pytest.raises(EmptyInput):
        render_case_overlay(lm([[0, 0]]), lm([[0, 0], [1, 1]]), lm([[0, 0]]),
                            tmp_path / "o.svg")
    empty = LandmarkSet(points=np.empty((0, 2)))
    with pytest.raises(EmptyInput):
        render_case_overlay(empty, empty, empty, tmp_path / "o.svg")


# --- boxplots ----------------------------------------------------------------

def test_boxplot_orders_methods_by_mean_median_rtre(tmp_path):
    metrics = (
        [case_metric(i, "slowmed", 0.05 + 0.01 * i) for i in range(5)]
        + [case_metric(i, "best", 0.01 + 0.001 * i) for i in range(5)]
        + [case_metric(i, "mid", 0.03 + 0.005 * i) for i in range(5)]
    )
    out = render_boxplots(metrics, tmp_path / "b.svg")
    root = svg_root(out)
    order = [g.get("data-method") for g in root.iter(f"{SVG}g")
             if g.get("class") == "box"]
    assert order == ["best", "mid", "slowmed"]


def test_boxplot_quartiles_in_tooltip(tmp_path):
    values = [1.0, 2.0, 3.0, 4.0, 5.0]
    metrics = [case_metric(i, "m", v) for i, v in enumerate(values)]
    out = render_boxplots(metrics, tmp_path / "b.svg")
    title = svg_root(out).find(f".//{SVG}g[@class='box']/{SVG}title").text
    assert "q1 2," in title and "median 3," in title and "q3 4," in title
    assert "min 1," in title and "max 5" in title


def test_boxplot_metric_selection(tmp_path):
    metrics = [case_metric(i, "m", 0.01, rob=0.25 * i) for i in range(5)]
    out = render_boxplots(metrics, tmp_path / "b.svg", metric="robustness")
    title = svg_root(out).find(f".//{SVG}g[@class='box']/{SVG}title").text
    assert "median 0.5" in title


def test_boxplot_errors(tmp_path):
    with pytest.raises(EmptyInput):
        render_boxplots([], tmp_path / "b.svg")
    with pytest.raises(EmptyInput):
        render_boxplots([case_metric(0, "m", 0.1)], tmp_path / "b.svg",
                        metric="nope")


# --- radar -------------------------------------------------------------------

def polygon_radii(root, method):
    for poly in root.iter(f"{SVG}polygon"):
        if poly.get("data-method") == method:
            pts = [tuple(map(float, p.split(","))) for p in poly.get("points").split()]
            cx = sum(p[0] for p in pts) / len(pts)
            # center is the chart middle: recover from the svg viewBox
            size = float(root.get("width"))
            return [math.hypot(x - size / 2, y - size / 2) for x, y in pts]
    raise AssertionError(f"no polygon for {method}")


def test_radar_dominant_method_is_strictly_inside(tmp_path):
    best = summary(method="best", med=0.01, rob=0.95,
                   avg_max_rtre=0.02, median_median_rtre=0.01, avg_time_min=1.0)
    worst = summary(method="worst", med=0.08, rob=0.2,
                    avg_max_rtre=0.2, median_median_rtre=0.09, avg_time_min=9.0)
    out = render_radar([best, worst], tmp_path / "r.svg")
    root = svg_root(out)
    r_best = polygon_radii(root, "best")
    r_worst = polygon_radii(root, "worst")
    assert max(r_best) < min(r_worst)


def test_radar_weakness_axis_inverts_robustness(tmp_path):
    a = summary(method="a", rob=0.9)
    b = summary(method="b", rob=0.2)
    out = render_radar([a, b], tmp_path / "r.svg")
    root = svg_root(out)
    titles = {p.get("data-method"): p.findtext(f"{SVG}title")
              for p in root.iter(f"{SVG}polygon") if p.get("data-method")}
    assert "weakness: 0.1" in titles["a"]
    assert "weakness: 0.8" in titles["b"]
    labels = [t.text for t in root.iter(f"{SVG}text")]
    assert "weakness" in labels


def test_radar_single_method(tmp_path):
    out = render_radar([summary()], tmp_path / "r.svg")
    assert svg_root(out).find(f".//{SVG}polygon[@data-method='m']") is not None
    with pytest.raises(EmptyInput):
        render_radar([], tmp_path / "r.svg")


# --- scope and tissue charts -------------------------------------------------

def test_scope_comparison_one_curve_per_scope(tmp_path, rng):
    metrics = [case_metric(i, "m", v, scope="full")
               for i, v in enumerate(rng.uniform(0.01, 0.1, 20))]
    metrics += [case_metric(i, "m", v, scope="10k")
                for i, v in enumerate(rng.uniform(0.02, 0.2, 20))]
    out = render_scope_comparison(metrics, tmp_path / "s.svg")
    root = svg_root(out)
    scopes = {p.get("data-scope") for p in root.iter(f"{SVG}polyline")}
    assert scopes == {"full", "10k"}


def test_scope_comparison_requires_two_scopes(tmp_path):
    with pytest.raises(MissingScope):
        render_scope_comparison([case_metric(0, "m", 0.05, scope="")],
                                tmp_path / "s.svg")
    with pytest.raises(MissingScope):
        render_scope_comparison([case_metric(0, "m", 0.05, scope="full")],
                                tmp_path / "s.svg")


def test_tissue_breakdown_bar_means(tmp_path):
    metrics = [
        case_metric(0, "m", 0.02, tissue="lung"),
        case_metric(1, "m", 0.04, tissue="lung"),
        case_metric(2, "m", 0.10, tissue="mammary"),
    ]
    out = render_tissue_breakdown(metrics, tmp_path / "t.svg")
    root = svg_root(out)
    bars = {(r.get("data-tissue"), r.get("data-method")): r.findtext(f"{SVG}title")
            for r in root.iter(f"{SVG}rect") if r.get("class") == "bar"}
    assert len(bars) == 2
    assert "0.03" in bars[("lung", "m")]
    assert "0.1" in bars[("mammary", "m")]
    with pytest.raises(EmptyInput):
        render_tissue_breakdown([case_metric(0, "m", 0.1)], tmp_path / "t.svg")


def test_scope_and_tissue_charts_honor_metric_choice(tmp_path):
    metrics = [
        case_metric(0, "m", 0.02, tissue="lung", scope="full", time_s=60.0),
        case_metric(1, "m", 0.04, tissue="lung", scope="full", time_s=180.0),
        case_metric(2, "m", 0.05, tissue="lung", scope="10k", time_s=120.0),
    ]
    out = render_tissue_breakdown(metrics, tmp_path / "t.svg", metric="time")
    root = svg_root(out)
    bars = {r.get("data-tissue"): r.findtext(f"{SVG}title")
            for r in root.iter(f"{SVG}rect") if r.get("class") == "bar"}
    # minutes, not the default rTRE: (1 + 3 + 2) / 3
    assert bars["lung"] == "lung / m: 2"

    out = render_scope_comparison(metrics, tmp_path / "s.svg", metric="robustness")
    titles = [t.text for t in svg_root(out).iter(f"{SVG}text")]
    assert any(t and t.startswith("robustness by scope") for t in titles)

    for render in (render_scope_comparison, render_tissue_breakdown):
        with pytest.raises(EmptyInput):
            render(metrics, tmp_path / "x.svg", metric="accuracy")


def test_svg_is_well_formed_xml(tmp_path):
    # parse with the strict stdlib parser; any malformed markup raises
    metrics = [case_metric(i, "m", 0.01 * (i + 1), tissue="lung") for i in range(4)]
    for path in (
        render_boxplots(metrics, tmp_path / "b.svg"),
        render_radar([summary()], tmp_path / "r.svg"),
        render_tissue_breakdown(metrics, tmp_path / "t.svg"),
    ):
        assert ET.parse(path).getroot().tag == f"{SVG}svg"
        assert path.read_text().startswith("<?xml")
