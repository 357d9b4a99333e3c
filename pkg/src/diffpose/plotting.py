"""SVG line charts for loss traces and ablation grids."""
from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ConfigError  # noqa: E402

# fixed element ids and no timestamp, so identical data gives identical bytes
plt.rcParams["svg.hashsalt"] = "diffpose"
plt.rcParams["svg.fonttype"] = "none"


def read_csv_columns(path: str | os.PathLike) -> dict[str, list[str]]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"csv file not found: {p}")
    with p.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigError(f"{p}: empty csv")
        cols: dict[str, list[str]] = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name in cols:
                cols[name].append(row[name])
    return cols


def _numeric(values: Sequence[str], name: str) -> list[float]:
    out = []
    for v in values:
        if v == "":
            out.append(float("nan"))
            continue
        try:
            out.append(float(v))
        except ValueError as exc:
            raise ConfigError(f"column {name!r} is not numeric ({v!r})") from exc
    return out


def _save(fig, out: str | os.PathLike) -> Path:
    p = Path(out)
    p.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(p, format="svg", metadata={"Date": None})
    plt.close(fig)
    return p


def line_chart(csv_path: str | os.PathLike, x: str, ys: Sequence[str], out: str | os.PathLike,
               log_y: bool = False, title: str | None = None) -> Path:
    cols = read_csv_columns(csv_path)
    for name in (x, *ys):
        if name not in cols:
            raise ConfigError(f"column {name!r} not in {sorted(cols)}")
    xs = _numeric(cols[x], x)
    fig, ax = plt.subplots(figsize=(6, 4))
    for y in ys:
        ax.plot(xs, _numeric(cols[y], y), label=y, linewidth=1.2)
    ax.set_xlabel(x)
    if log_y:
        ax.set_yscale("log")
    if len(ys) > 1:
        ax.legend()
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, out)


def ablation_chart(rows: Sequence[dict], out: str | os.PathLike, metric: str = "pck@0.1") -> Path:
    """Metric against sampling steps, one line per ensemble size, all/hard/easy panels."""
    subsets = ("all", "hard", "easy")
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.4), sharey=True)
    for ax, subset in zip(axes, subsets):
        for n in sorted({r["N"] for r in rows}):
            sel = sorted((r for r in rows if r["N"] == n), key=lambda r: r["steps"])
            vals = [r[f"{subset}_{metric}"] for r in sel]
            vals = [float("nan") if v is None else v for v in vals]
            ax.plot([r["steps"] for r in sel], vals, marker="o", label=f"N={n}")
        ax.set_title(subset)
        ax.set_xlabel("sampling steps")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel(metric)
    axes[-1].legend()
    fig.tight_layout()
    return _save(fig, out)
