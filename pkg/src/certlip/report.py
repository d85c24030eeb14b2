"""Aggregation of training runs into depth/VRA and churn tables, with SVG plots."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .config import load_config
from .gloro import churn_metric


def read_trainlog(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


def read_threats(path) -> list[np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [np.array([int(c) for c in r["threats"].split()], dtype=int) for r in rows]


def churn_from_threats(threats: list[np.ndarray]) -> list[float]:
    return [churn_metric(a, b) for a, b in zip(threats[:-1], threats[1:])]


def summarize_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    rows = read_trainlog(run_dir / "trainlog.csv")
    cfg = load_config(run_dir / "config.ini")
    churn = [r["churn"] for r in rows]
    if (run_dir / "threats.csv").exists():
        churn = churn_from_threats(read_threats(run_dir / "threats.csv"))
    return {
        "run": run_dir.name,
        "family": cfg.model.family,
        "depth": cfg.model.depth,
        "width": cfg.model.width,
        "loss": cfg.train.loss,
        "num_classes": cfg.data.num_classes if cfg.data.kind == "blobs" else len(cfg.data.radii.split(",")),
        "final_clean": rows[-1]["clean_acc"],
        "final_vra": rows[-1]["vra"],
        "best_vra": max(r["vra"] for r in rows),
        "churn": churn,
    }


SUMMARY_COLUMNS = ["run", "family", "depth", "width", "loss", "num_classes", "final_clean", "final_vra", "best_vra"]


def depth_table(summaries: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in sorted(summaries, key=lambda s: (s["depth"], s["run"])):
        w.writerow([s[c] if not isinstance(s[c], float) else repr(s[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def churn_table(summaries: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch"] + [s["run"] for s in summaries])
    n = max(len(s["churn"]) for s in summaries)
    for e in range(n):
        w.writerow([e] + [repr(s["churn"][e]) if e < len(s["churn"]) else "" for s in summaries])
    return buf.getvalue()


def svg_lines(series: dict[str, tuple[list[float], list[float]]], title: str, xlabel: str, ylabel: str,
              width: int = 480, height: int = 320) -> str:
    """Minimal line chart; each series is ``name -> (xs, ys)``."""
    pad = 48
    xs = [x for xv, _ in series.values() for x in xv] or [0, 1]
    ys = [y for _, yv in series.values() for y in yv] or [0, 1]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2}" y="16" text-anchor="middle">{escape(title)}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="12" y="{height / 2}" transform="rotate(-90 12 {height / 2})" text-anchor="middle">{escape(ylabel)}</text>',
        f'<text x="{pad}" y="{height - pad + 14}" text-anchor="middle">{x0:g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 14}" text-anchor="middle">{x1:g}</text>',
        f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end">{y0:.3g}</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end">{y1:.3g}</text>',
    ]
    for k, (name, (xv, yv)) in enumerate(series.items()):
        c = colors[k % len(colors)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xv, yv))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        for x, y in zip(xv, yv):
            out.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="2" fill="{c}"/>')
        out.append(f'<text x="{width - pad + 4}" y="{pad + 14 * k}" fill="{c}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report(run_dirs, out_file) -> list[dict]:
    """Write ``out_file`` (depth table), ``*_churn.csv`` and two SVG plots beside it."""
    summaries = [summarize_run(d) for d in run_dirs]
    out = Path(out_file)
    out.write_text(depth_table(summaries), encoding="utf-8")
    stem = out.with_suffix("")
    Path(f"{stem}_churn.csv").write_text(churn_table(summaries), encoding="utf-8")
    by_family: dict[str, tuple[list, list]] = {}
    for s in sorted(summaries, key=lambda s: s["depth"]):
        xs, ys = by_family.setdefault(s["family"], ([], []))
        xs.append(s["depth"])
        ys.append(s["final_vra"])
    Path(f"{stem}_depth.svg").write_text(svg_lines(by_family, "VRA vs depth", "blocks L", "VRA"), encoding="utf-8")
    churn_series = {s["run"]: (list(range(len(s["churn"]))), s["churn"]) for s in summaries}
    Path(f"{stem}_churn.svg").write_text(
        svg_lines(churn_series, "threatening-class churn", "epoch", "fraction changed"), encoding="utf-8"
    )
    return summaries
