"""Merge run directories into one table and render plot data as SVG."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .pipeline import METRIC_COLUMNS, csv_text, write_text  # noqa: E402

# figure family -> (title, x label, y label)
FIGURES = {
    "fig2": ("noise injection", "lambda", "MMD^2"),
    "fig3_left": ("feature agreement per timestep", "t", "mean cosine"),
    "fig3_right": ("best-matching full-precision timestep", "t", "t + delta"),
    "fig9": ("temporal feature agreement by strategy", "t", "E_t"),
    "fig11": ("cache -> selection -> TIB", "fraction of TIB cells", "metric"),
}


class ReportError(ValueError):
    pass


def read_metrics(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != METRIC_COLUMNS:
        raise ReportError(f"{path}: expected columns {','.join(METRIC_COLUMNS)}")
    return [dict(zip(METRIC_COLUMNS, r)) for r in rows[1:]]


def read_xy(path: Path) -> tuple[list[float], list[float]]:
    xs, ys = [], []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ReportError(f"{path}: expected two columns, got {line!r}")
        xs.append(float(parts[0]))
        ys.append(float(parts[1]))
    return xs, ys


def _sort_key(r: dict):
    return (r["strategy"], int(r["w_bits"]), int(r["a_bits"]), int(r["seed"]))


def merge_runs(run_dirs: list[Path]) -> list[dict]:
    """All evaluation rows of all runs, keyed by (strategy, bits, seed)."""
    rows = []
    for d in run_dirs:
        files = sorted(Path(d).glob("eval/*/metrics.csv"))
        if not files:
            raise ReportError(f"{d}: no eval/*/metrics.csv found")
        for f in files:
            for r in read_metrics(f):
                r["run"] = str(d)
                rows.append(r)
    return sorted(rows, key=lambda r: (_sort_key(r), r["run"]))


def fig9_data(run_dirs: list[Path], out: Path) -> list[Path]:
    """Per-timestep E_t of every evaluated strategy, one file per (run, strategy)."""
    written = []
    for k, d in enumerate(run_dirs):
        for f in sorted(Path(d).glob("eval/*/timesteps.csv")):
            with open(f, newline="") as fh:
                rows = list(csv.DictReader(fh))
            rows.sort(key=lambda r: int(r["t"]))
            lines = ["# t E_t"] + [f"{r['t']} {r['E_temporal']}" for r in rows]
            written.append(write_text(out / f"fig9_{f.parent.name}_run{k}.dat", "\n".join(lines) + "\n"))
    return written


def plot_family(name: str, files: list[Path], out: Path) -> Path:
    title, xl, yl = FIGURES[name]
    fig, ax = plt.subplots(figsize=(6, 4))
    for f in files:
        xs, ys = read_xy(f)
        ax.plot(xs, ys, marker="o" if len(xs) < 20 else None, markersize=3, label=f.stem)
    ax.set_title(title)
    ax.set_xlabel(xl)
    ax.set_ylabel(yl)
    if files:
        ax.legend(fontsize=6)
    path = out / f"{name}.svg"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def build_report(run_dirs: list[Path], out: Path) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ReportError("report needs at least one run directory")
    rows = merge_runs(run_dirs)
    table = write_text(out / "report.csv", csv_text(rows, list(METRIC_COLUMNS) + ["run"]))
    dat = fig9_data(run_dirs, out)
    for d in run_dirs:
        dat += sorted(Path(d).glob("analysis/*.dat"))
    svgs = []
    for name in FIGURES:
        members = [f for f in dat if f.name.startswith(name + "_") or f.stem == name]
        if members:
            svgs.append(plot_family(name, members, out))
    return {"table": str(table), "rows": len(rows), "svg": [str(s) for s in svgs]}
