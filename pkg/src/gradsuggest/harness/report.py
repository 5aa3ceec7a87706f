"""CSV results and static SVG budget/Dice charts."""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from ..exceptions import EmptyInputError, FormatError
from .protocol import RoundReport

CSV_COLUMNS = (
    "scenario", "method", "strategy", "budget", "seed", "dice",
    "annotated_slices", "context_slices", "fallbacks", "wall_ms",
)
CSV_NAME = "results.csv"

_COLORS = {"random": "#7f7f7f", "gradient": "#d62728", "oracle": "#1f77b4"}


def summarize(reports) -> list:
    """Mean and population std of Dice per (scenario, strategy, method, budget)."""
    groups: "OrderedDict[tuple, list]" = OrderedDict()
    for r in reports:
        groups.setdefault((r.scenario, r.strategy, r.method, r.budget), []).append(r.dice)
    out = []
    for (scenario, strategy, method, budget), dices in groups.items():
        arr = np.array(dices)
        out.append({
            "scenario": scenario, "strategy": strategy, "method": method, "budget": budget,
            "mean": float(arr.mean()), "std": float(arr.std()), "n": len(arr), "dices": tuple(dices),
        })
    return out


def write_csv(reports, path, timings: bool = False) -> Path:
    """One row per report; ``wall_ms`` is written as 0 unless ``timings`` is set."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow([
                r.scenario, r.method, r.strategy, r.budget, r.seed, repr(float(r.dice)),
                r.annotated_slices, r.context_slices, r.fallbacks, r.wall_ms if timings else 0,
            ])
    return path


def read_csv(path) -> list:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise FormatError("results CSV has an unexpected header", str(path), 0)
    reports = []
    for row in rows[1:]:
        if len(row) != len(CSV_COLUMNS):
            raise FormatError(f"results CSV row has {len(row)} fields", str(path))
        rec = dict(zip(CSV_COLUMNS, row))
        reports.append(RoundReport(
            scenario=rec["scenario"], method=rec["method"], strategy=rec["strategy"],
            budget=int(rec["budget"]), seed=int(rec["seed"]), dice=float(rec["dice"]),
            annotated_slices=int(rec["annotated_slices"]), context_slices=int(rec["context_slices"]),
            fallbacks=int(rec["fallbacks"]), wall_ms=int(rec["wall_ms"]),
        ))
    return reports


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def render_svg(summary_rows, title: str, width: int = 480, height: int = 320) -> str:
    """Line chart of mean Dice vs budget with a +-1 std band per method."""
    left, right, top, bottom = 56, 110, 30, 44
    pw, ph = width - left - right, height - top - bottom
    budgets = sorted({r["budget"] for r in summary_rows})
    lo = min(r["mean"] - r["std"] for r in summary_rows)
    hi = max(r["mean"] + r["std"] for r in summary_rows)
    lo, hi = max(0.0, math.floor(lo * 20) / 20), min(1.0, math.ceil(hi * 20) / 20)
    if hi <= lo:
        lo, hi = max(0.0, lo - 0.05), min(1.0, hi + 0.05)
    b0, b1 = budgets[0], budgets[-1]

    def sx(b):
        return left + (pw * (b - b0) / (b1 - b0) if b1 > b0 else pw / 2)

    def sy(v):
        return top + ph * (1 - (v - lo) / (hi - lo))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left}" y="18" font-family="sans-serif" font-size="13">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for b in budgets:
        x = _fmt(sx(b))
        out.append(f'<line x1="{x}" y1="{top + ph}" x2="{x}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x}" y="{top + ph + 16}" font-family="sans-serif" font-size="10" text-anchor="middle">{b}</text>')
    for i in range(5):
        v = lo + (hi - lo) * i / 4
        y = _fmt(sy(v))
        out.append(f'<line x1="{left - 4}" y1="{y}" x2="{left}" y2="{y}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{y}" font-family="sans-serif" font-size="10" text-anchor="end" dominant-baseline="middle">{v:.2f}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 8}" font-family="sans-serif" font-size="11" text-anchor="middle">budget</text>')
    out.append(f'<text x="14" y="{top + ph / 2}" font-family="sans-serif" font-size="11" text-anchor="middle" transform="rotate(-90 14 {top + ph / 2})">mean Dice</text>')

    methods = list(OrderedDict.fromkeys(r["method"] for r in summary_rows))
    for k, method in enumerate(methods):
        rows = sorted((r for r in summary_rows if r["method"] == method), key=lambda r: r["budget"])
        color = _COLORS.get(method, "#2ca02c")
        upper = [f'{_fmt(sx(r["budget"]))},{_fmt(sy(min(hi, r["mean"] + r["std"])))}' for r in rows]
        lower = [f'{_fmt(sx(r["budget"]))},{_fmt(sy(max(lo, r["mean"] - r["std"])))}' for r in reversed(rows)]
        out.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        pts = " ".join(f'{_fmt(sx(r["budget"]))},{_fmt(sy(r["mean"]))}' for r in rows)
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2" data-method="{escape(method)}"/>')
        ly = top + 12 + 16 * k
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly + 4}" font-family="sans-serif" font-size="11">{escape(method)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(reports, out_dir, timings: bool = False) -> list:
    """Write ``results.csv`` and one ``dice_<scenario>_<strategy>.svg`` per chart."""
    reports = list(reports)
    if not reports:
        raise EmptyInputError("no reports to emit")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_csv(reports, out_dir / CSV_NAME, timings)]
    summary = summarize(reports)
    charts = OrderedDict()
    for row in summary:
        charts.setdefault((row["scenario"], row["strategy"]), []).append(row)
    for (scenario, strategy), rows in charts.items():
        path = out_dir / f"dice_{scenario}_{strategy}.svg"
        path.write_text(render_svg(rows, f"{scenario} / {strategy}-wise"), encoding="utf-8")
        written.append(path)
    return written
