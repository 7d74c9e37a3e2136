"""Pivot tables and SVG line plots of mean PSNR/SSIM against acceleration."""

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import _method_order, read_metrics_csv, summarize, write_summary  # noqa: E402

__all__ = ["PSNR_CEILING", "line_series", "write_pivots", "plot_metric", "build_report"]

# infinite PSNR (exact recovery) is drawn at this height
PSNR_CEILING = 100.0
METRICS = {"psnr": "mean PSNR (dB)", "ssim": "mean SSIM"}


def _series_name(method, source_R, multi_source):
    return f"{method} (source R={source_R:g})" if multi_source else method


def _gid(metric, method, source_R, multi_source):
    return f"{metric}-{method}" + (f"-src{source_R:g}" if multi_source else "")


def line_series(summary, metric, contrast):
    """``[(method, source_R, [(R, mean), ...]), ...]`` for one contrast, ordered by method."""
    lines = {}
    for g in summary["groups"]:
        if g["contrast"] != contrast:
            continue
        lines.setdefault((g["method"], g["source_R"]), []).append((g["target_R"], g[f"{metric}_mean"]))
    keys = sorted(lines, key=lambda k: (_method_order(k[0]), k[0], k[1]))
    return [(m, s, sorted(lines[(m, s)])) for m, s in keys]


def write_pivots(summary, directory):
    """One CSV per (metric, contrast): rows are accelerations, columns per-method mean and std."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    contrasts = sorted({g["contrast"] for g in summary["groups"]})
    for metric in METRICS:
        for contrast in contrasts:
            groups = [g for g in summary["groups"] if g["contrast"] == contrast]
            cols = sorted({(g["method"], g["source_R"]) for g in groups}, key=lambda k: (_method_order(k[0]), k))
            multi = len({s for _, s in cols}) > 1
            rates = sorted({g["target_R"] for g in groups})
            cell = {(g["method"], g["source_R"], g["target_R"]): g for g in groups}
            path = directory / f"{metric}_{contrast}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                header = ["target_R"]
                for m, s in cols:
                    name = _series_name(m, s, multi)
                    header += [f"{name} {metric}_mean", f"{name} {metric}_std"]
                w.writerow(header)
                for r in rates:
                    row = [f"{r:g}"]
                    for m, s in cols:
                        g = cell.get((m, s, r))
                        row += ["", ""] if g is None else [repr(g[f"{metric}_mean"]), repr(g[f"{metric}_std"])]
                    w.writerow(row)
            paths.append(path)
    return paths


def plot_metric(summary, metric, contrast, path):
    """Line plot of the per-method mean ``metric`` against target R, saved as SVG.

    Each method's line carries the SVG id ``<metric>-<method>``.
    """
    series = line_series(summary, metric, contrast)
    multi = len({s for _, s, _ in series}) > 1
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    capped = False
    for method, source_R, points in series:
        xs = [r for r, _ in points]
        ys = []
        for _, v in points:
            if metric == "psnr" and math.isinf(v):
                v, capped = PSNR_CEILING, True
            ys.append(v)
        (line,) = ax.plot(xs, ys, marker="o", label=_series_name(method, source_R, multi))
        line.set_gid(_gid(metric, method, source_R, multi))
    ax.set_xlabel("acceleration R")
    ylabel = METRICS[metric] + (f", exact = {PSNR_CEILING:g}" if capped else "")
    ax.set_ylabel(ylabel)
    ax.set_title(f"{contrast}: {METRICS[metric]} vs R")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    with plt.rc_context({"svg.hashsalt": "mcr", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def build_report(metrics_csv, out_dir, contrasts=None):
    """Read ``metrics.csv`` and write ``summary.json``, pivot CSVs and one SVG per (metric, contrast)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize(read_metrics_csv(metrics_csv))
    write_summary(summary, out_dir / "summary.json")
    written = write_pivots(summary, out_dir)
    present = sorted({g["contrast"] for g in summary["groups"]})
    for contrast in (present if contrasts is None else [c for c in present if c in contrasts]):
        for metric in METRICS:
            written.append(plot_metric(summary, metric, contrast, out_dir / f"{metric}_{contrast}.svg"))
    return written
