"""Run reports: loss curves, center-error curves, corruption sweeps as SVG.

The SVG writer is deliberately minimal and fully deterministic (fixed
float formatting, no timestamps), so report files are byte-reproducible
and diff-able.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

SUMMARY_SCHEMA = "poidet-summary/1"

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class ReportError(Exception):
    pass


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def line_chart_svg(series: list[tuple[str, list[float], list[float]]],
                   title: str, xlabel: str, ylabel: str,
                   width: int = 640, height: int = 400,
                   log_y: bool = False) -> str:
    """Polyline chart; series = [(label, xs, ys), ...]."""
    import math

    margin_l, margin_r, margin_t, margin_b = 60, 20, 36, 46
    plot_w = width - margin_l - margin_r
    plot_h = height - margin_t - margin_b
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys if not (y != y)]
    if not xs_all or not ys_all:
        raise ReportError(f"chart '{title}' has no data")
    if log_y:
        ys_all = [max(y, 1e-12) for y in ys_all]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    if log_y:
        y_lo, y_hi = math.log10(max(y_lo, 1e-12)), math.log10(max(y_hi, 1e-12))
        if y_hi == y_lo:
            y_hi = y_lo + 1.0

    def px(x: float) -> float:
        return margin_l + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y: float) -> float:
        if log_y:
            y = math.log10(max(y, 1e-12))
        return margin_t + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]
    # axes
    x0, y0 = margin_l, margin_t + plot_h
    parts.append(f'<line x1="{x0}" y1="{margin_t}" x2="{x0}" y2="{y0}" '
                 'stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{margin_l + plot_w}" y2="{y0}" '
                 'stroke="black"/>')
    for i in range(5):
        fx = x_lo + (x_hi - x_lo) * i / 4
        fy = y_lo + (y_hi - y_lo) * i / 4
        label_y = 10 ** fy if log_y else fy
        parts.append(f'<text x="{px(fx):.1f}" y="{y0 + 16}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="10">{_fmt(fx)}</text>')
        parts.append(f'<text x="{x0 - 6}" y="{margin_t + plot_h * (1 - i / 4) + 3:.1f}" '
                     f'text-anchor="end" font-family="sans-serif" font-size="10">'
                     f'{_fmt(label_y)}</text>')
    parts.append(f'<text x="{margin_l + plot_w / 2:.1f}" y="{height - 8}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="12">{xlabel}</text>')
    parts.append(f'<text x="14" y="{margin_t + plot_h / 2:.1f}" '
                 f'text-anchor="middle" font-family="sans-serif" font-size="12" '
                 f'transform="rotate(-90 14 {margin_t + plot_h / 2:.1f})">'
                 f'{ylabel}</text>')
    for si, (label, xs, ys) in enumerate(series):
        color = PALETTE[si % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys)
                       if not (y != y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     'stroke-width="1.5"/>')
        parts.append(f'<text x="{margin_l + plot_w - 4}" '
                     f'y="{margin_t + 14 + 14 * si}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11" '
                     f'fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def read_train_log(path) -> dict[str, list[float]]:
    cols: dict[str, list[float]] = {"step": [], "total": [], "l_cls": [],
                                    "l_reg": []}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            for key in cols:
                cols[key].append(float(row[key]))
    return cols


def write_report(run_dir, out_dir=None) -> dict:
    """Emit SVG charts and a summary JSON for a completed run directory.

    Expects train_log.csv and/or eval_report.json inside `run_dir`.
    """
    run = Path(run_dir)
    out = Path(out_dir) if out_dir else run
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"schema": SUMMARY_SCHEMA, "charts": []}

    log_path = run / "train_log.csv"
    if log_path.exists():
        cols = read_train_log(log_path)
        if cols["step"]:
            svg = line_chart_svg(
                [("total", cols["step"], cols["total"]),
                 ("l_cls", cols["step"], cols["l_cls"]),
                 ("l_reg", cols["step"], cols["l_reg"])],
                title="training loss", xlabel="step", ylabel="loss", log_y=True)
            (out / "loss_curve.svg").write_text(svg, encoding="utf-8")
            summary["charts"].append("loss_curve.svg")
            summary["final_loss"] = cols["total"][-1]
            summary["steps"] = int(cols["step"][-1]) + 1

    meta_path = run / "train_meta.json"
    if meta_path.exists():
        summary["train_meta"] = json.loads(meta_path.read_text(encoding="utf-8"))

    report_path = run / "eval_report.json"
    if report_path.exists():
        report = json.loads(report_path.read_text(encoding="utf-8"))
        summary["eval"] = {"map": report["map"],
                           "config_hash": report["config_hash"],
                           "revision": report["revision"]}
        errs = report.get("mean_center_error", [])
        if errs:
            iters = list(range(1, len(errs) + 1))
            svg = line_chart_svg(
                [("mean center error", [float(i) for i in iters],
                  [float(e) for e in errs])],
                title="center error by decoder iteration",
                xlabel="iteration", ylabel="meters")
            (out / "center_error.svg").write_text(svg, encoding="utf-8")
            summary["charts"].append("center_error.svg")
            summary["eval"]["mean_center_error"] = errs
        sweep = report.get("corruptions", [])
        if sweep:
            xs = list(range(len(sweep)))
            svg = line_chart_svg(
                [("corrupted mAP", [float(x) for x in xs],
                  [float(c["map"]) for c in sweep]),
                 ("clean mAP", [float(x) for x in xs],
                  [float(report["map"])] * len(sweep))],
                title="corruption sweep", xlabel="corruption index",
                ylabel="mAP")
            (out / "corruption_sweep.svg").write_text(svg, encoding="utf-8")
            summary["charts"].append("corruption_sweep.svg")
            summary["eval"]["corruptions"] = sweep

    if not summary["charts"] and "train_meta" not in summary:
        raise ReportError(f"nothing to report in {run}")
    (out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=1), encoding="utf-8")
    return summary
