"""Summary tables and SVG charts built from case metrics.

Everything here renders deterministic, self-contained files: plain CSV or
Markdown for tables and hand-assembled SVG for charts. Error ratios are
stored as plain ratios everywhere else; only this layer turns them into
percent for display (0.023 becomes "2.30").
"""

from __future__ import annotations

import csv
import math
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from .errors import EmptyInput, FewerThanThreeAxes, MissingScope
from .metrics import CaseMetrics, DatasetSummary

SVG_NS = "http://www.w3.org/2000/svg"

OVERLAY_TRUE_COLOR = "green"  # moving -> fixed, the annotated mapping
OVERLAY_ESTIMATE_COLOR = "blue"  # moving -> warped, what the method did
OVERLAY_ERROR_COLOR = "red"  # warped -> fixed, the residual

METHOD_PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
    "#9467bd", "#8c564b", "#e377c2", "#17becf",
)

RADAR_AXES = (
    ("avg median rTRE", "avg_median_rtre"),
    ("median median rTRE", "median_median_rtre"),
    ("avg max rTRE", "avg_max_rtre"),
    ("weakness", "weakness"),
    ("avg time [min]", "avg_time_min"),
)

TABLE_COLUMNS = (
    "method", "scope",
    "median_rtre_avg_pct", "median_rtre_std_pct", "median_rtre_median_pct",
    "max_rtre_avg_pct", "max_rtre_std_pct",
    "robustness_avg", "robustness_std", "robustness_median",
    "time_avg_min", "time_std_min",
    "cases", "failures",
)


def format_ratio_percent(value: float) -> str:
    """Render a ratio as percent with two decimals; blank for missing."""
    if value is None or math.isnan(value):
        return ""
    return f"{value * 100:.2f}"


def _fmt(value: float, digits: int = 3) -> str:
    if value is None or math.isnan(value):
        return ""
    return f"{value:.{digits}f}"


def _table_row(s: DatasetSummary) -> list[str]:
    return [
        s.method, s.scope,
        format_ratio_percent(s.avg_median_rtre),
        format_ratio_percent(s.std_median_rtre),
        format_ratio_percent(s.median_median_rtre),
        format_ratio_percent(s.avg_max_rtre),
        format_ratio_percent(s.std_max_rtre),
        _fmt(s.avg_robustness), _fmt(s.std_robustness), _fmt(s.median_robustness),
        _fmt(s.avg_time_min, 2), _fmt(s.std_time_min, 2),
        str(s.case_count), str(s.failure_count),
    ]


def render_summary_table(summaries: list[DatasetSummary], out_path: Path | str) -> Path:
    """Write the aggregate comparison table, CSV or Markdown by extension.

    Rows are sorted by average median rTRE so the best method leads.
    """
    out_path = Path(out_path)
    ordered = sorted(summaries, key=_summary_sort_key)
    rows = [_table_row(s) for s in ordered]
    if out_path.suffix.lower() == ".md":
        lines = [
            "| " + " | ".join(TABLE_COLUMNS) + " |",
            "| " + " | ".join("---" for _ in TABLE_COLUMNS) + " |",
        ]
        for row in rows:
            lines.append("| " + " | ".join(v or "-" for v in row) + " |")
        out_path.write_text("\n".join(lines) + "\n")
    else:
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TABLE_COLUMNS)
            writer.writerows(rows)
    return out_path


def _summary_sort_key(s: DatasetSummary):
    v = s.avg_median_rtre
    return (math.isnan(v), v, s.method, s.scope)


def empirical_cdf(values) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF: sorted values and the fraction of data at or below each."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise EmptyInput("empirical CDF of nothing")
    x = np.sort(arr)
    f = np.arange(1, arr.size + 1, dtype=np.float64) / arr.size
    return x, f


# --- SVG plumbing -----------------------------------------------------------

def _svg_root(width: int, height: int) -> ET.Element:
    return ET.Element(
        "svg",
        {
            "xmlns": SVG_NS,
            "width": str(width),
            "height": str(height),
            "viewBox": f"0 0 {width} {height}",
        },
    )


def _write_svg(root: ET.Element, out_path: Path) -> Path:
    ET.ElementTree(root).write(out_path, encoding="unicode", xml_declaration=True)
    return out_path


def _line(parent, x1, y1, x2, y2, stroke, width="1.5", title=None, cls=None):
    el = ET.SubElement(
        parent, "line",
        {"x1": _num(x1), "y1": _num(y1), "x2": _num(x2), "y2": _num(y2),
         "stroke": stroke, "stroke-width": width},
    )
    if cls:
        el.set("class", cls)
    if title:
        ET.SubElement(el, "title").text = title
    return el


def _text(parent, x, y, content, size=11, anchor="start", fill="#333"):
    el = ET.SubElement(
        parent, "text",
        {"x": _num(x), "y": _num(y), "font-size": str(size),
         "text-anchor": anchor, "fill": fill,
         "font-family": "sans-serif"},
    )
    el.text = content
    return el


def _num(v) -> str:
    return f"{float(v):.2f}"


# --- charts -----------------------------------------------------------------

def render_case_overlay(
    fixed,
    moving,
    warped,
    out_path: Path | str,
    *,
    title: str = "",
    image_size: tuple[float, float] | None = None,
) -> Path:
    """Draw one case's landmark geometry as three families of segments.

    Per landmark: the annotated mapping moving->fixed in green, the
    method's mapping moving->warped in blue, and the residual
    warped->fixed in red. Exactly three line elements per landmark.
    """
    fpts, mpts, wpts = (np.asarray(getattr(p, "points", p), dtype=np.float64)
                        for p in (fixed, moving, warped))
    if not (len(fpts) == len(mpts) == len(wpts)):
        raise EmptyInput(
            f"overlay needs equal-length sets, got {len(fpts)}/{len(mpts)}/{len(wpts)}"
        )
    if len(fpts) == 0:
        raise EmptyInput("overlay of zero landmarks")

    allpts = np.vstack([fpts, mpts, wpts])
    if image_size is not None:
        lo = np.array([0.0, 0.0])
        hi = np.array(image_size, dtype=np.float64)
    else:
        lo = allpts.min(axis=0)
        hi = allpts.max(axis=0)
    span = np.maximum(hi - lo, 1.0)
    width, height = 640, 640
    margin = 40.0

    def sx(x):
        return margin + (x - lo[0]) / span[0] * (width - 2 * margin)

    def sy(y):
        return margin + (y - lo[1]) / span[1] * (height - 2 * margin)

    root = _svg_root(width, height + 30)
    if title:
        _text(root, width / 2, 20, title, size=14, anchor="middle")
    body = ET.SubElement(root, "g", {"class": "landmarks"})
    for i in range(len(fpts)):
        fx, fy = fpts[i]
        mx, my = mpts[i]
        wx, wy = wpts[i]
        err = math.hypot(wx - fx, wy - fy)
        _line(body, sx(mx), sy(my), sx(fx), sy(fy), OVERLAY_TRUE_COLOR,
              cls="true-mapping", title=f"landmark {i}: true displacement")
        _line(body, sx(mx), sy(my), sx(wx), sy(wy), OVERLAY_ESTIMATE_COLOR,
              cls="estimated-mapping", title=f"landmark {i}: estimated displacement")
        _line(body, sx(wx), sy(wy), sx(fx), sy(fy), OVERLAY_ERROR_COLOR,
              cls="registration-error", title=f"landmark {i}: error {err:.3f} px")
        ET.SubElement(body, "circle", {"cx": _num(sx(fx)), "cy": _num(sy(fy)),
                                       "r": "2.5", "fill": OVERLAY_TRUE_COLOR})
    legend = ET.SubElement(root, "g", {"class": "legend"})
    for dx, color, label in (
        (0, OVERLAY_TRUE_COLOR, "true mapping"),
        (150, OVERLAY_ESTIMATE_COLOR, "estimated mapping"),
        (330, OVERLAY_ERROR_COLOR, "error"),
    ):
        _line(legend, 40 + dx, height + 15, 70 + dx, height + 15, color, width="3")
        _text(legend, 76 + dx, height + 19, label)
    return _write_svg(root, Path(out_path))


CHART_METRICS = {
    "mrtre": ("median rTRE", lambda m: m.final_median_rtre),
    "srtre": ("max rTRE", lambda m: m.final_max_rtre),
    "robustness": ("robustness", lambda m: m.robustness),
    "time": ("normalized time [min]", lambda m: m.normalized_time_s / 60.0),
}


def _chart_metric(metric: str):
    if metric not in CHART_METRICS:
        raise EmptyInput(f"unknown chart metric {metric!r}, "
                         f"choose from {sorted(CHART_METRICS)}")
    return CHART_METRICS[metric]


def _method_order(metrics: list[CaseMetrics]) -> list[str]:
    """Methods ordered by increasing mean of per-case median rTRE."""
    methods: dict[str, list[float]] = {}
    for m in metrics:
        methods.setdefault(m.method, []).append(m.final_median_rtre)
    return sorted(methods, key=lambda name: float(np.mean(methods[name])))


def render_boxplots(
    metrics: list[CaseMetrics], out_path: Path | str, *, metric: str = "mrtre"
) -> Path:
    """One box per method: quartile box, median line, min/max whiskers.

    Methods run left to right from best to worst average median rTRE,
    whatever metric is plotted.
    """
    label, getter = _chart_metric(metric)
    if not metrics:
        raise EmptyInput("boxplot of zero cases")
    label = f"{label} per case"
    order = _method_order(metrics)
    values = {
        name: np.array([getter(m) for m in metrics if m.method == name], dtype=np.float64)
        for name in order
    }

    width = 120 + 110 * len(order)
    height = 420
    top, bottom, left = 50.0, 360.0, 80.0
    all_values = np.concatenate(list(values.values()))
    vmax = float(all_values.max())
    vmin = min(0.0, float(all_values.min()))
    span = (vmax - vmin) or 1.0

    def sy(v):
        return bottom - (v - vmin) / span * (bottom - top)

    root = _svg_root(width, height)
    _text(root, width / 2, 24, label, size=14, anchor="middle")
    _line(root, left - 20, bottom, width - 20, bottom, "#999", width="1")
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = vmin + frac * span
        _text(root, left - 26, sy(v) + 4, f"{v:.4g}", size=10, anchor="end")
        _line(root, left - 22, sy(v), left - 16, sy(v), "#999", width="1")

    for idx, name in enumerate(order):
        data = values[name]
        q1, med, q3 = (float(q) for q in np.percentile(data, [25, 50, 75]))
        lo_w, hi_w = float(data.min()), float(data.max())
        cx = left + 40 + idx * 110
        half = 28.0
        g = ET.SubElement(root, "g", {"class": "box", "data-method": name})
        ET.SubElement(g, "title").text = (
            f"{name}: min {lo_w:.6g}, q1 {q1:.6g}, median {med:.6g}, "
            f"q3 {q3:.6g}, max {hi_w:.6g}"
        )
        color = METHOD_PALETTE[idx % len(METHOD_PALETTE)]
        _line(g, cx, sy(hi_w), cx, sy(q3), "#555", width="1")
        _line(g, cx, sy(q1), cx, sy(lo_w), "#555", width="1")
        _line(g, cx - half / 2, sy(hi_w), cx + half / 2, sy(hi_w), "#555", width="1")
        _line(g, cx - half / 2, sy(lo_w), cx + half / 2, sy(lo_w), "#555", width="1")
        ET.SubElement(
            g, "rect",
            {"x": _num(cx - half), "y": _num(sy(q3)),
             "width": _num(2 * half), "height": _num(max(sy(q1) - sy(q3), 0.5)),
             "fill": color, "fill-opacity": "0.45", "stroke": color},
        )
        _line(g, cx - half, sy(med), cx + half, sy(med), "#111", width="2",
              cls="median")
        _text(root, cx, bottom + 20, name, size=11, anchor="middle")
    return _write_svg(root, Path(out_path))


def render_radar(summaries: list[DatasetSummary], out_path: Path | str) -> Path:
    """Radar chart over the aggregate axes; smaller polygons are better.

    Every axis is scaled so 0 is the best method and 1 the worst; the
    robustness axis is flipped into weakness (1 - robustness) first. With
    a single method the axes run from 0 to that method's own value.
    """
    if len(RADAR_AXES) < 3:
        raise FewerThanThreeAxes("radar needs at least three axes")
    if not summaries:
        raise EmptyInput("radar of zero methods")

    raw: list[list[float]] = []
    for s in summaries:
        row = []
        for _, attr in RADAR_AXES:
            if attr == "weakness":
                value = 1.0 - s.avg_robustness
            else:
                value = getattr(s, attr)
            row.append(0.0 if value is None or math.isnan(value) else float(value))
        raw.append(row)
    arr = np.array(raw, dtype=np.float64)
    scaled = np.zeros_like(arr)
    for j in range(arr.shape[1]):
        col = arr[:, j]
        if len(summaries) == 1:
            top = col[0]
            scaled[:, j] = 0.5 if top == 0 else col / top
        else:
            lo, hi = col.min(), col.max()
            scaled[:, j] = 0.5 if hi == lo else (col - lo) / (hi - lo)

    size = 520
    cx = cy = size / 2
    radius = size / 2 - 70
    n_axes = len(RADAR_AXES)
    root = _svg_root(size, size + 30 * len(summaries))

    def point(axis_idx: int, r: float) -> tuple[float, float]:
        angle = -math.pi / 2 + 2 * math.pi * axis_idx / n_axes
        return cx + r * math.cos(angle), cy + r * math.sin(angle)

    grid = ET.SubElement(root, "g", {"class": "grid"})
    for frac in (0.25, 0.5, 0.75, 1.0):
        ring = " ".join(
            f"{x:.2f},{y:.2f}" for x, y in (point(i, radius * frac) for i in range(n_axes))
        )
        ET.SubElement(grid, "polygon",
                      {"points": ring, "fill": "none", "stroke": "#ddd"})
    for i, (label, _) in enumerate(RADAR_AXES):
        ex, ey = point(i, radius)
        _line(grid, cx, cy, ex, ey, "#bbb", width="1")
        lx, ly = point(i, radius + 24)
        _text(root, lx, ly, label, size=11, anchor="middle")

    for k, s in enumerate(summaries):
        pts = [point(i, radius * scaled[k, i]) for i in range(n_axes)]
        poly = ET.SubElement(
            root, "polygon",
            {
                "points": " ".join(f"{x:.2f},{y:.2f}" for x, y in pts),
                "fill": METHOD_PALETTE[k % len(METHOD_PALETTE)],
                "fill-opacity": "0.25",
                "stroke": METHOD_PALETTE[k % len(METHOD_PALETTE)],
                "stroke-width": "2",
                "class": "method",
                "data-method": s.method,
            },
        )
        ET.SubElement(poly, "title").text = ", ".join(
            f"{label}: {arr[k, i]:.6g}" for i, (label, _) in enumerate(RADAR_AXES)
        )
        ly = size + 20 + 24 * k
        _line(root, 40, ly - 4, 70, ly - 4,
              METHOD_PALETTE[k % len(METHOD_PALETTE)], width="3")
        _text(root, 76, ly, f"{s.method} ({s.scope})" if s.scope else s.method)
    return _write_svg(root, Path(out_path))


def render_scope_comparison(
    metrics: list[CaseMetrics], out_path: Path | str, *, metric: str = "mrtre"
) -> Path:
    """Overlay the per-scope empirical CDFs of a per-case metric."""
    label, getter = _chart_metric(metric)
    scopes: dict[str, list[float]] = {}
    for m in metrics:
        if m.scope:
            scopes.setdefault(m.scope, []).append(getter(m))
    if len(scopes) < 2:
        raise MissingScope("scope comparison needs cases from two scopes, "
                           f"got {sorted(scopes) if scopes else 'none'}")

    width, height = 560, 400
    left, right, top, bottom = 70.0, 520.0, 40.0, 330.0
    xmax = max(max(v) for v in scopes.values()) or 1.0

    root = _svg_root(width, height)
    _text(root, width / 2, 22, f"{label} by scope (empirical CDF)",
          size=14, anchor="middle")
    _line(root, left, bottom, right, bottom, "#999", width="1")
    _line(root, left, top, left, bottom, "#999", width="1")
    for frac in (0.0, 0.5, 1.0):
        _text(root, left - 8, bottom - frac * (bottom - top) + 4,
              f"{frac:.1f}", size=10, anchor="end")
        _text(root, left + frac * (right - left), bottom + 16,
              f"{frac * xmax:.4g}", size=10, anchor="middle")

    for k, (scope, vals) in enumerate(sorted(scopes.items())):
        x, f = empirical_cdf(vals)
        pts = [(left, bottom)]
        pts += [
            (left + xi / xmax * (right - left), bottom - fi * (bottom - top))
            for xi, fi in zip(x, f)
        ]
        color = METHOD_PALETTE[k % len(METHOD_PALETTE)]
        poly = ET.SubElement(
            root, "polyline",
            {
                "points": " ".join(f"{px:.2f},{py:.2f}" for px, py in pts),
                "fill": "none", "stroke": color, "stroke-width": "2",
                "class": "scope", "data-scope": scope,
            },
        )
        ET.SubElement(poly, "title").text = f"{scope}: {len(vals)} cases"
        ly = 50 + 18 * k
        _line(root, right - 120, ly, right - 95, ly, color, width="3")
        _text(root, right - 88, ly + 4, scope)
    return _write_svg(root, Path(out_path))


def render_tissue_breakdown(
    metrics: list[CaseMetrics], out_path: Path | str, *, metric: str = "mrtre"
) -> Path:
    """Grouped bars: per-case metric averaged for each tissue and method."""
    label, getter = _chart_metric(metric)
    tissues: dict[str, dict[str, list[float]]] = {}
    for m in metrics:
        if not m.tissue_type:
            continue
        tissues.setdefault(m.tissue_type, {}).setdefault(m.method, []).append(
            getter(m)
        )
    if not tissues:
        raise EmptyInput("no tissue tags on any case")
    methods = _method_order([m for m in metrics if m.tissue_type])

    means = {
        t: {meth: float(np.mean(v)) for meth, v in per.items()}
        for t, per in tissues.items()
    }
    vmax = max(max(per.values()) for per in means.values()) or 1.0

    bar_w = 26.0
    group_w = bar_w * len(methods) + 30
    width = int(100 + group_w * len(tissues))
    height = 420
    bottom, top = 340.0, 60.0

    root = _svg_root(width, height)
    _text(root, width / 2, 24, f"mean {label} by tissue", size=14, anchor="middle")
    _line(root, 60, bottom, width - 20, bottom, "#999", width="1")
    for frac in (0.5, 1.0):
        v = frac * vmax
        y = bottom - frac * (bottom - top)
        _text(root, 54, y + 4, f"{v:.4g}", size=10, anchor="end")
        _line(root, 56, y, 60, y, "#999", width="1")

    for ti, tissue in enumerate(sorted(means)):
        gx = 80 + ti * group_w
        for mi, meth in enumerate(methods):
            if meth not in means[tissue]:
                continue
            v = means[tissue][meth]
            h = v / vmax * (bottom - top)
            x = gx + mi * bar_w
            rect = ET.SubElement(
                root, "rect",
                {"x": _num(x), "y": _num(bottom - h),
                 "width": _num(bar_w - 4), "height": _num(max(h, 0.5)),
                 "fill": METHOD_PALETTE[mi % len(METHOD_PALETTE)],
                 "class": "bar", "data-tissue": tissue, "data-method": meth},
            )
            ET.SubElement(rect, "title").text = f"{tissue} / {meth}: {v:.6g}"
        _text(root, gx + bar_w * len(methods) / 2, bottom + 18, tissue,
              size=11, anchor="middle")
    for mi, meth in enumerate(methods):
        ly = height - 40 + 16 * mi
        if ly > height - 6:
            break
        _line(root, 60, ly, 84, ly, METHOD_PALETTE[mi % len(METHOD_PALETTE)], width="3")
        _text(root, 90, ly + 4, meth, size=10)
    return _write_svg(root, Path(out_path))
