"""CSV, SVG and plain-text renderings of a MetricsReport."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from ..errors import ArgumentError, DataError, StateError
from .grid import Cell, MetricsReport

CSV_COLUMNS = ("train", "target", "fer_mean", "fer_min", "fer_max", "seeds", "table", "arm", "status")

TABLE_TITLES = {
    1: "FER (%) for models trained and tested on various domains",
    2: "FER (%) for models trained with reverberation augmentation",
    3: "FER (%) for the clean-trained model on enhanced and dereverberated data",
    4: "FER (%) for models trained on FHVAE latent features",
}


def _check(metrics: MetricsReport) -> None:
    if not metrics.cells:
        raise StateError("refusing to write a report with no arms")


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def to_csv(metrics: MetricsReport) -> str:
    """``seeds`` holds the per-seed values as ``seed=fer`` pairs joined by ``;``."""
    _check(metrics)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in metrics.cells:
        seeds = ";".join(f"{s}={c.fers[s]!r}" for s in sorted(c.fers))
        status = f"failed: {c.failed}" if c.failed else "ok"
        w.writerow([c.train, c.target, _fmt(c.mean), _fmt(c.min), _fmt(c.max), seeds,
                    c.table, c.arm, status])
    return buf.getvalue()


def parse_csv(text: str) -> MetricsReport:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise DataError("report CSV has no rows")
    missing = set(CSV_COLUMNS) - set(rows[0])
    if missing:
        raise DataError(f"report CSV lacks columns {sorted(missing)}")
    cells = []
    for r in rows:
        fers = {}
        for pair in filter(None, r["seeds"].split(";")):
            seed, value = pair.split("=")
            fers[int(seed)] = float(value)
        status = r["status"]
        failed = status[len("failed: "):] if status.startswith("failed: ") else None
        cells.append(Cell(r["train"], r["target"], fers, int(r["table"]), r["arm"], failed))
    return MetricsReport(cells)


def to_text(metrics: MetricsReport) -> str:
    _check(metrics)
    lines = []
    for table in sorted({c.table for c in metrics.cells}):
        cells = [c for c in metrics.cells if c.table == table]
        width = max(len("train"), *(len(c.train) for c in cells)) + 2
        twidth = max(len("target"), *(len(c.target) for c in cells)) + 2
        lines.append(f"Table {table}: {TABLE_TITLES.get(table, 'FER (%)')}")
        lines.append(f"{'train':<{width}}{'target':<{twidth}}{'FER':>7}  {'range':<15}seeds")
        lines.append("-" * (width + twidth + 30))
        prev = None
        for c in cells:
            if prev is not None and c.arm != prev:
                lines.append("")
            prev = c.arm
            if c.failed:
                lines.append(f"{c.train:<{width}}{c.target:<{twidth}}{'failed':>7}  {c.failed}")
                continue
            rng = f"[{c.min:.1f}, {c.max:.1f}]"
            lines.append(f"{c.train:<{width}}{c.target:<{twidth}}{c.mean:7.1f}  {rng:<15}{c.seeds}")
        lines.append("")
    return "\n".join(lines)


def to_svg(metrics: MetricsReport) -> str:
    """One bar panel per table; whiskers span the seed range."""
    _check(metrics)
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tables = sorted({c.table for c in metrics.cells})
    fig, axes = plt.subplots(len(tables), 1, figsize=(8, 3.2 * len(tables)), squeeze=False)
    for ax, table in zip(axes[:, 0], tables):
        cells = [c for c in metrics.cells if c.table == table]
        x = np.arange(len(cells))
        means = [0.0 if c.failed else c.mean for c in cells]
        lo = [0.0 if c.failed else c.mean - c.min for c in cells]
        hi = [0.0 if c.failed else c.max - c.mean for c in cells]
        colors = ["#bbbbbb" if c.failed else "#4477aa" for c in cells]
        ax.bar(x, means, color=colors, yerr=[lo, hi], capsize=3)
        ax.set_xticks(x)
        ax.set_xticklabels([f"{c.train}\n→ {c.target}" for c in cells], fontsize=7)
        ax.set_ylabel("FER (%)")
        ax.set_title(f"Table {table}", fontsize=9)
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg")
    plt.close(fig)
    return buf.getvalue()


RENDERERS = {"csv": to_csv, "svg": to_svg, "text": to_text}
SUFFIX = {"csv": "csv", "svg": "svg", "text": "txt"}


def report(metrics: MetricsReport, out_dir, formats=("csv", "svg", "text")) -> list[Path]:
    """Write ``report.<ext>`` for every requested format; returns the paths."""
    _check(metrics)
    unknown = set(formats) - set(RENDERERS)
    if unknown:
        raise ArgumentError(f"unknown report formats {sorted(unknown)}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for fmt in formats:
            path = out_dir / f"report.{SUFFIX[fmt]}"
            path.write_text(RENDERERS[fmt](metrics), encoding="utf-8")
            paths.append(path)
    except OSError as exc:
        raise DataError(f"cannot write report: {exc}", out_dir=str(out_dir)) from exc
    return paths
