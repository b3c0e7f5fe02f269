"""Report files: CSV tables, a log-log SVG error plot and a JSON summary."""
from __future__ import annotations

import csv
import io
import json
import math
from datetime import datetime, timezone
from pathlib import Path

from .registry import RunRecord, _encode

SVG_W, SVG_H, PAD = 480, 360, 50


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(_cell(x) for x in v)
    return str(v)


def table_csv(columns, rows, footer=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    if footer:
        buf.write(footer + "\n")
    return buf.getvalue()


def _slope_text(slope) -> str:
    return "undefined" if slope is None else repr(float(slope))


def error_plot_svg(deltas, errs, slope=None, r2=None, deterministic=True) -> str:
    """Log-log scatter of error against delta with the fitted line."""
    pts = [(math.log10(d), math.log10(e)) for d, e in zip(deltas, errs)
           if d > 0 and e is not None and math.isfinite(e) and e > 0]
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs) - 0.25, max(xs) + 0.25
    y0, y1 = min(ys) - 0.5, max(ys) + 0.5

    def sx(x):
        return PAD + (x - x0) / (x1 - x0) * (SVG_W - 2 * PAD)

    def sy(y):
        return SVG_H - PAD - (y - y0) / (y1 - y0) * (SVG_H - 2 * PAD)

    out = ['<?xml version="1.0" encoding="UTF-8"?>']
    if not deterministic:
        out.append(f"<!-- generated {datetime.now(timezone.utc).isoformat()} -->")
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}">')
    out.append(f'<rect x="{PAD}" y="{PAD}" width="{SVG_W - 2 * PAD}" '
               f'height="{SVG_H - 2 * PAD}" fill="none" stroke="black"/>')
    out.append(f'<text x="{SVG_W / 2:.1f}" y="{SVG_H - 12}" text-anchor="middle">'
               'log10 delta</text>')
    out.append(f'<text x="14" y="{SVG_H / 2:.1f}" transform="rotate(-90 14 {SVG_H / 2:.1f})" '
               'text-anchor="middle">log10 error</text>')
    for x, y in pts:
        out.append(f'<circle class="marker" cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="4" '
                   'fill="steelblue"/>')
    if slope is not None and len(pts) >= 2:
        mx, my = sum(xs) / len(xs), sum(ys) / len(ys)
        a, b = min(xs), max(xs)
        out.append(f'<line class="fit" x1="{sx(a):.2f}" y1="{sy(my + slope * (a - mx)):.2f}" '
                   f'x2="{sx(b):.2f}" y2="{sy(my + slope * (b - mx)):.2f}" '
                   'stroke="firebrick" stroke-dasharray="4 3"/>')
        label = f"slope {slope:.3f}" + ("" if r2 is None else f", r2 {r2:.3f}")
        out.append(f'<text x="{PAD + 8}" y="{PAD + 18}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(record: RunRecord, out_dir, deterministic: bool = True) -> dict:
    """Write every table as CSV plus ``plot.svg`` and ``summary.json``.

    Returns the mapping of written file names to paths.  The errors table
    ends with a ``# fitted_slope=`` footer carrying the same value as the
    summary.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    tables = record.results.get("tables", {})
    slope, r2 = record.results.get("slope"), record.results.get("r2")
    written = {}
    notes = []

    def write(name, text):
        path = out / name
        try:
            path.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written[name] = str(path)

    for name, tab in tables.items():
        footer = f"# fitted_slope={_slope_text(slope)}" if name == "errors" and tab["rows"] else None
        write(f"{name}.csv", table_csv(tab["columns"], tab["rows"], footer))
        if not tab["rows"]:
            notes.append(f"{name}: no data")
    errs = tables.get("errors")
    if errs and errs["rows"]:
        cols = errs["columns"]
        d = [r[cols.index("delta")] for r in errs["rows"]]
        e = [r[cols.index("err_mean")] for r in errs["rows"]]
        if any(isinstance(v, float) and math.isfinite(v) and v > 0 for v in e):
            write("plot.svg", error_plot_svg(d, e, slope, r2, deterministic))
        else:
            notes.append("errors: all zero or non-finite, no plot")
    summary = {"run_id": record.run_id, "kind": record.kind, "status": record.status,
               "config_hash": record.config_hash, "seed_family": record.seed_family,
               "slope": slope, "r2": r2, "verdicts": record.results.get("verdicts", {}),
               "notes": notes or (["no data"] if not tables else []),
               "files": sorted(written) + ["summary.json"]}
    if "I_ref" in record.results:
        summary["I_ref"] = record.results["I_ref"]
    if not deterministic:
        summary["metrics"] = record.metrics
    write("summary.json", json.dumps(_encode(summary), indent=2, sort_keys=True) + "\n")
    record.manifest["files"] = sorted(written)
    return written
