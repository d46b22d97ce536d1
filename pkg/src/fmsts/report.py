"""Learning-curve plots as standalone SVG (log10 y axis, no plotting dependency)."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .trainer import read_metrics_csv

WIDTH, HEIGHT = 820, 520
LEFT, RIGHT, TOP, BOTTOM = 80, 180, 30, 60
PALETTE = ("#c0392b", "#2471a3", "#229954", "#7d3c98", "#d68910", "#17a589", "#566573")


def load_series(paths) -> list:
    series = []
    for p in paths:
        rows = read_metrics_csv(p)
        it = np.array([r["iteration"] for r in rows])
        mean = np.array([r["mean_test_nodes"] for r in rows])
        half = np.array([r["half_width"] for r in rows]) if "half_width" in rows[0] else None
        series.append({"name": Path(p).stem, "iteration": it, "mean": mean, "half_width": half})
    return series


def _log_range(values):
    vals = [v for v in values if v > 0 and math.isfinite(v)]
    if not vals:
        return 0.0, 1.0
    lo, hi = math.floor(math.log10(min(vals))), math.ceil(math.log10(max(vals)))
    if hi <= lo:
        hi = lo + 1
    return float(lo), float(hi)


def render_svg(series, baselines: dict | None = None, title: str = "mean test tree size") -> str:
    baselines = baselines or {}
    xs = np.concatenate([s["iteration"] for s in series])
    ys = []
    for s in series:
        ys.extend(s["mean"])
        if s["half_width"] is not None:
            ys.extend(s["mean"] + np.nan_to_num(s["half_width"]))
            ys.extend(s["mean"] - np.nan_to_num(s["half_width"]))
    ys.extend(baselines.values())
    ylo, yhi = _log_range(ys)
    xlo, xhi = float(np.nanmin(xs)), float(np.nanmax(xs))
    if xhi <= xlo:
        xhi = xlo + 1.0
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + (x - xlo) / (xhi - xlo) * pw

    def py(y):
        y = max(y, 10 ** ylo)
        return TOP + (yhi - math.log10(y)) / (yhi - ylo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{LEFT}" y="18" font-size="14">{escape(title)}</text>']
    grid = ['<g class="grid">']
    for dec in range(int(ylo), int(yhi) + 1):
        y = py(10.0 ** dec)
        grid.append(f'<line class="major" x1="{LEFT}" x2="{LEFT + pw}" y1="{y:.2f}" y2="{y:.2f}" '
                    f'stroke="#999" stroke-width="1"/>')
        grid.append(f'<text x="{LEFT - 8}" y="{y + 4:.2f}" text-anchor="end">1e{dec}</text>')
        if dec < yhi:
            for k in range(2, 10):
                ym = py(k * 10.0 ** dec)
                grid.append(f'<line class="minor" x1="{LEFT}" x2="{LEFT + pw}" y1="{ym:.2f}" '
                            f'y2="{ym:.2f}" stroke="#ddd" stroke-width="0.6"/>')
    for k in range(6):
        xv = xlo + k * (xhi - xlo) / 5
        grid.append(f'<text x="{px(xv):.2f}" y="{TOP + ph + 18}" text-anchor="middle">{xv:g}</text>')
    grid.append('</g>')
    out += grid
    out.append(f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{LEFT + pw / 2}" y="{HEIGHT - 15}" text-anchor="middle">iteration</text>')
    out.append(f'<text x="18" y="{TOP + ph / 2}" transform="rotate(-90 18 {TOP + ph / 2})" '
               f'text-anchor="middle">nodes (log scale)</text>')

    for k, s in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        ok = np.isfinite(s["mean"]) & (s["mean"] > 0)
        it, mean = s["iteration"][ok], s["mean"][ok]
        out.append(f'<g class="series" data-name="{escape(s["name"])}">')
        if s["half_width"] is not None:
            hw = np.nan_to_num(s["half_width"][ok])
            upper = [(px(x), py(m + h)) for x, m, h in zip(it, mean, hw)]
            lower = [(px(x), py(m - h)) for x, m, h in zip(it, mean, hw)]
            pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in upper + lower[::-1])
            hw_attr = " ".join(repr(float(h)) for h in hw)
            out.append(f'<polygon class="band" points="{pts}" fill="{color}" fill-opacity="0.2" '
                       f'stroke="none" data-half-widths="{hw_attr}"/>')
        pts = " ".join(f"{px(x):.2f},{py(m):.2f}" for x, m in zip(it, mean))
        out.append(f'<polyline class="mean" points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = TOP + 14 + 18 * k
        out.append(f'<line x1="{LEFT + pw + 12}" x2="{LEFT + pw + 32}" y1="{ly}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 38}" y="{ly + 4}">{escape(s["name"])}</text>')
        out.append('</g>')
    for k, (name, value) in enumerate(sorted(baselines.items())):
        if not (value > 0 and math.isfinite(value)):
            continue
        y = py(value)
        ly = TOP + 14 + 18 * (len(series) + k)
        out.append(f'<g class="baseline" data-name="{escape(name)}">'
                   f'<line x1="{LEFT}" x2="{LEFT + pw}" y1="{y:.2f}" y2="{y:.2f}" stroke="#555" '
                   f'stroke-dasharray="6 4"/>'
                   f'<text x="{LEFT + pw + 38}" y="{ly + 4}">{escape(name)} (dashed)</text></g>')
    out.append('</svg>')
    return "\n".join(out) + "\n"


def merged_rows(series) -> list:
    rows = []
    for s in series:
        hw = s["half_width"] if s["half_width"] is not None else np.full(len(s["mean"]), math.nan)
        for it, m, h in zip(s["iteration"], s["mean"], hw):
            rows.append({"source": s["name"], "iteration": int(it), "mean_test_nodes": float(m),
                         "half_width": float(h)})
    return rows


def write_report(metric_paths, svg_path, baselines: dict | None = None) -> tuple:
    series = load_series(metric_paths)
    svg_path = Path(svg_path)
    svg_path.write_text(render_svg(series, baselines))
    csv_path = svg_path.with_suffix(".csv")
    rows = merged_rows(series)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "iteration", "mean_test_nodes", "half_width"])
        for r in rows:
            w.writerow([r["source"], r["iteration"], repr(r["mean_test_nodes"]), repr(r["half_width"])])
    return svg_path, csv_path
