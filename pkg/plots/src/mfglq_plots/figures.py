"""Render mfglq CSV outputs to image files.

Two chart kinds: time-series overlays of the columns in a trajectory CSV,
and log-log convergence charts of per-population-size gap samples.  The
input files are never written to; rendering is deterministic for identical
inputs (no timestamps end up in the images).
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["FigureSpec", "plot_overlay", "plot_slopes",
           "main_overlay", "main_slopes"]


@dataclass(frozen=True)
class FigureSpec:
    """Column selection for one overlay chart."""

    csv_path: str
    series: dict
    title: str
    out_path: str

    def __post_init__(self):
        if not self.series:
            raise ValueError("series map is empty")

    def check_columns(self, header) -> None:
        missing = [c for c in self.series.values() if c not in header]
        if missing:
            raise ValueError(
                f"columns not in {self.csv_path}: {', '.join(missing)}")


def _read_table(csv_path: str):
    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{csv_path} is empty")
    header = rows[0]
    body = rows[1:]
    if not body:
        raise ValueError(f"{csv_path} has a header but no data rows")
    data = np.array([[float(v) for v in row] for row in body])
    if data.shape[1] != len(header):
        raise ValueError(f"{csv_path}: ragged rows")
    return header, data


def _save(fig, out_path: str) -> None:
    metadata = {"Date": None} if out_path.endswith(".svg") else None
    fig.savefig(out_path, dpi=150, metadata=metadata)
    plt.close(fig)


def plot_overlay(csv_path: str, out_path: str, title: str | None = None,
                 spec: FigureSpec | None = None) -> str:
    """Line chart of every non-time column against t; legend from the header.

    With a FigureSpec only the mapped columns are drawn, legend labels from
    the map keys.
    """
    header, data = _read_table(csv_path)
    if "t" not in header:
        raise ValueError(f"{csv_path} has no 't' column")
    t = data[:, header.index("t")]
    if spec is not None:
        spec.check_columns(header)
        series = spec.series
        title = spec.title
    else:
        series = {name: name for name in header if name != "t"}
        if not series:
            raise ValueError(f"{csv_path} has no series columns besides 't'")

    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    for label, column in series.items():
        ax.plot(t, data[:, header.index(column)], label=label)
    ax.set_xlabel("t")
    ax.legend()
    ax.grid(True, alpha=0.3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, out_path)
    return out_path


def plot_slopes(report_csv: str, out_path: str,
                title: str | None = None) -> str:
    """Log-log chart of gap samples by population size with a fitted line.

    Expects columns N and gap (extra columns such as replication are
    ignored); needs at least 3 distinct sizes with positive mean gap.
    """
    header, data = _read_table(report_csv)
    for column in ("N", "gap"):
        if column not in header:
            raise ValueError(f"{report_csv} has no '{column}' column")
    Nvals = data[:, header.index("N")]
    gaps = data[:, header.index("gap")]

    sizes = np.unique(Nvals)
    if len(sizes) < 3:
        raise ValueError(
            f"need at least 3 distinct population sizes, got {len(sizes)}")
    means = np.array([np.mean(gaps[Nvals == s]) for s in sizes])
    if np.any(means <= 0.0):
        raise ValueError("mean gap must be positive at every size")

    logN = np.log(sizes)
    coeffs = np.polyfit(logN, np.log(means), 1)
    slope = float(coeffs[0])
    fit = np.exp(np.polyval(coeffs, logN))

    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    positive = gaps > 0.0
    ax.scatter(Nvals[positive], gaps[positive], s=12, alpha=0.35,
               label="samples")
    ax.plot(sizes, means, "o-", label="mean gap")
    ax.plot(sizes, fit, "--", label=f"fit, slope {slope:+.3f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("gap")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, out_path)
    return out_path


def _run(render, argv, prog: str, kind: str) -> int:
    parser = argparse.ArgumentParser(
        prog=prog, description=f"Render a {kind} chart from a CSV file.")
    parser.add_argument("input", help="input CSV")
    parser.add_argument("output", help="output image (png, svg, pdf, ...)")
    parser.add_argument("--title", default=None)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 1
        return 0 if code == 0 else 1
    try:
        render(args.input, args.output, title=args.title)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.output}")
    return 0


def main_overlay(argv=None) -> int:
    return _run(plot_overlay, argv, "plot_overlay", "trajectory overlay")


def main_slopes(argv=None) -> int:
    return _run(plot_slopes, argv, "plot_slopes", "convergence slope")


if __name__ == "__main__":
    sys.exit(main_overlay())
