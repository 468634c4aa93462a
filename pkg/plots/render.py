#!/usr/bin/env python3
"""Static figure rendering for run-directory CSV outputs.

Reads the CSV files a solver run writes (trajectories, fixed-point
iteration reports, convergence tables, two-parameter norm scans, field
snapshots) and emits deterministic PNG figures. No numerical logic lives
here: every number plotted must already exist in a CSV.

Usage:
    python plots/render.py --spec figure.yaml
    python plots/render.py --all --run-dir RUNDIR [--out-dir DIR]

A figure spec file is a small YAML mapping:

    kind: timeseries            # timeseries | loglog | heatmap | field
    input: out/trajectory.csv
    x: t
    y: [energy, x_norm]         # loglog/heatmap take single columns
    xlabel: time                # optional labels
    ylabel: energy
    title: conserved energy
    output: figures/energy.png
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import yaml

KINDS = ("timeseries", "loglog", "heatmap", "field")

_SAVE_OPTS = {"dpi": 110, "metadata": {"Software": "plots-gallery"}}


class RenderError(ValueError):
    """Bad figure spec or CSV contents."""


@dataclass
class FigureSpec:
    kind: str
    input: str
    output: str
    x: Optional[str] = None
    y: Sequence[str] = field(default_factory=list)
    value: Optional[str] = None
    xlabel: Optional[str] = None
    ylabel: Optional[str] = None
    title: Optional[str] = None

    @classmethod
    def from_file(cls, path) -> "FigureSpec":
        data = yaml.safe_load(Path(path).read_text())
        if not isinstance(data, dict):
            raise RenderError(f"figure spec {path} must be a mapping")
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "FigureSpec":
        kind = data.get("kind")
        if kind not in KINDS:
            raise RenderError(f"kind must be one of {', '.join(KINDS)}; got {kind!r}")
        for key in ("input", "output"):
            if not data.get(key):
                raise RenderError(f"figure spec needs {key!r}")
        y = data.get("y", [])
        if isinstance(y, str):
            y = [y]
        return cls(
            kind=kind,
            input=str(data["input"]),
            output=str(data["output"]),
            x=data.get("x"),
            y=list(y),
            value=data.get("value"),
            xlabel=data.get("xlabel"),
            ylabel=data.get("ylabel"),
            title=data.get("title"),
        )


def read_csv(path) -> dict:
    """Read a CSV with a header into a dict of float column arrays.

    Empty cells become NaN (the iteration report leaves the first ratio
    blank on purpose).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise RenderError(f"{path} is empty") from None
        rows = [row for row in reader if row]
    if not rows:
        raise RenderError(f"{path} has a header but no data rows")
    cols = {name: [] for name in header}
    for row in rows:
        for name, cell in zip(header, row):
            cell = cell.strip()
            cols[name].append(float(cell) if cell else math.nan)
    return {name: np.asarray(vals) for name, vals in cols.items()}


def _require_columns(cols: dict, names, path) -> None:
    missing = [n for n in names if n and n not in cols]
    if missing:
        raise RenderError(
            f"{path} is missing columns {missing}; available: {sorted(cols)}"
        )


def _finish(fig, spec: FigureSpec) -> Path:
    out = Path(spec.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, **_SAVE_OPTS)
    plt.close(fig)
    return out


def render_timeseries(spec: FigureSpec) -> Path:
    cols = read_csv(spec.input)
    x = spec.x or "t"
    ys = spec.y or [n for n in cols if n != x]
    _require_columns(cols, [x, *ys], spec.input)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name in ys:
        ax.plot(cols[x], cols[name], label=name)
    ax.set_xlabel(spec.xlabel or x)
    ax.set_ylabel(spec.ylabel or ", ".join(ys))
    if spec.title:
        ax.set_title(spec.title)
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    return _finish(fig, spec)


def render_loglog(spec: FigureSpec) -> Path:
    cols = read_csv(spec.input)
    x = spec.x or list(cols)[0]
    y = (spec.y or [list(cols)[1]])[0]
    _require_columns(cols, [x, y], spec.input)
    xs, ys = cols[x], cols[y]
    good = np.isfinite(xs) & np.isfinite(ys) & (xs > 0) & (ys > 0)
    if good.sum() < 2:
        raise RenderError(f"{spec.input}: need at least two positive points for a log-log fit")
    slope, intercept = np.polyfit(np.log(xs[good]), np.log(ys[good]), 1)
    fig, ax = plt.subplots(figsize=(5.6, 4.2))
    ax.loglog(xs[good], ys[good], "o-", label=y)
    ax.loglog(
        xs[good],
        np.exp(intercept) * xs[good] ** slope,
        "--",
        label=f"fit slope {slope:.2f}",
    )
    ax.set_xlabel(spec.xlabel or x)
    ax.set_ylabel(spec.ylabel or y)
    if spec.title:
        ax.set_title(spec.title)
    ax.legend(loc="best")
    ax.grid(True, which="both", alpha=0.3)
    return _finish(fig, spec)


def render_heatmap(spec: FigureSpec) -> Path:
    cols = read_csv(spec.input)
    names = list(cols)
    x = spec.x or names[0]
    y = (spec.y or [names[1]])[0]
    v = spec.value or names[2]
    _require_columns(cols, [x, y, v], spec.input)
    xs = np.unique(cols[x])
    ys = np.unique(cols[y])
    grid = np.full((len(xs), len(ys)), np.nan)
    xi = np.searchsorted(xs, cols[x])
    yi = np.searchsorted(ys, cols[y])
    grid[xi, yi] = cols[v]
    fig, ax = plt.subplots(figsize=(5.8, 4.6))
    mesh = ax.pcolormesh(ys, xs, grid, shading="nearest", cmap="viridis")
    fig.colorbar(mesh, ax=ax, label=v)
    ax.set_xlabel(spec.xlabel or y)
    ax.set_ylabel(spec.ylabel or x)
    if spec.title:
        ax.set_title(spec.title)
    return _finish(fig, spec)


def render_field(spec: FigureSpec) -> Path:
    cols = read_csv(spec.input)
    if "theta" in cols:
        _require_columns(cols, ["x", "theta", "u", "w"], spec.input)
        xs = np.unique(cols["x"])
        ths = np.unique(cols["theta"])
        fig, axes = plt.subplots(1, 2, figsize=(9.6, 4.0))
        for ax, name in zip(axes, ("u", "w")):
            grid = np.full((len(xs), len(ths)), np.nan)
            xi = np.searchsorted(xs, cols["x"])
            ti = np.searchsorted(ths, cols["theta"])
            grid[xi, ti] = cols[name]
            mesh = ax.pcolormesh(ths, xs, grid, shading="nearest", cmap="RdBu_r")
            fig.colorbar(mesh, ax=ax, label=name)
            ax.set_xlabel(spec.xlabel or "theta")
            ax.set_ylabel(spec.ylabel or "x")
            ax.set_title(name)
    else:
        _require_columns(cols, ["x", "u", "w"], spec.input)
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        ax.plot(cols["x"], cols["u"], label="u")
        ax.plot(cols["x"], cols["w"], label="w", alpha=0.8)
        ax.set_xlabel(spec.xlabel or "x")
        ax.set_ylabel(spec.ylabel or "field value")
        ax.legend(loc="best")
        ax.grid(True, alpha=0.3)
    if spec.title:
        fig.suptitle(spec.title)
    return _finish(fig, spec)


_RENDERERS = {
    "timeseries": render_timeseries,
    "loglog": render_loglog,
    "heatmap": render_heatmap,
    "field": render_field,
}


def render(spec: FigureSpec) -> Path:
    """Render one figure; returns the written path."""
    return _RENDERERS[spec.kind](spec)


def render_gallery(run_dir, out_dir=None) -> list:
    """Render the standard figure set for a completed run directory.

    Every recognized CSV yields one figure; files that are absent are
    skipped, files that are present but unreadable are errors.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "figures"
    written = []

    trajectory = run_dir / "trajectory.csv"
    if trajectory.exists():
        written.append(
            render_timeseries(
                FigureSpec(
                    kind="timeseries",
                    input=str(trajectory),
                    output=str(out_dir / "trajectory.png"),
                    x="t",
                    y=["x_norm", "energy"],
                    xlabel="t",
                    title="state norm and energy",
                )
            )
        )

    iterations = run_dir / "iterations.csv"
    if iterations.exists():
        cols = read_csv(iterations)
        fig, axes = plt.subplots(1, 2, figsize=(9.2, 3.8))
        axes[0].semilogy(cols["iter"], cols["sup_diff"], "o-")
        axes[0].set_xlabel("iteration")
        axes[0].set_ylabel("sup difference")
        axes[0].grid(True, which="both", alpha=0.3)
        good = np.isfinite(cols["ratio"])
        if good.any():
            axes[1].plot(cols["iter"][good], cols["ratio"][good], "o-")
        axes[1].set_xlabel("iteration")
        axes[1].set_ylabel("contraction ratio")
        axes[1].grid(True, alpha=0.3)
        fig.suptitle("fixed-point iteration")
        out = out_dir / "iterations.png"
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, **_SAVE_OPTS)
        plt.close(fig)
        written.append(out)

    convergence = run_dir / "convergence.csv"
    if convergence.exists():
        written.append(
            render_loglog(
                FigureSpec(
                    kind="loglog",
                    input=str(convergence),
                    output=str(out_dir / "convergence.png"),
                    x="h",
                    y=["error"],
                    title="manufactured-solution convergence",
                )
            )
        )

    kato = run_dir / "kato.csv"
    if kato.exists():
        written.append(
            render_heatmap(
                FigureSpec(
                    kind="heatmap",
                    input=str(kato),
                    output=str(out_dir / "kato.png"),
                    x="t",
                    y=["s"],
                    value="norm",
                    title="two-parameter operator norm",
                )
            )
        )

    for snap in sorted(run_dir.glob("fields_t*.csv")):
        written.append(
            render_field(
                FigureSpec(
                    kind="field",
                    input=str(snap),
                    output=str(out_dir / (snap.stem + ".png")),
                    title=snap.stem.replace("fields_t", "fields at t="),
                )
            )
        )

    return written


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--spec", help="YAML figure spec file")
    parser.add_argument("--all", action="store_true", help="render the standard gallery")
    parser.add_argument("--run-dir", help="run directory for --all")
    parser.add_argument("--out-dir", help="figure output directory (default RUNDIR/figures)")
    args = parser.parse_args(argv)

    try:
        if args.all:
            if not args.run_dir:
                parser.error("--all needs --run-dir")
            written = render_gallery(args.run_dir, args.out_dir)
            if not written:
                print(f"no recognized CSV files in {args.run_dir}", file=sys.stderr)
                return 1
            for path in written:
                print(path)
            return 0
        if args.spec:
            print(render(FigureSpec.from_file(args.spec)))
            return 0
        parser.error("need --spec or --all")
    except (RenderError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
