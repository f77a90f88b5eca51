"""Static SVG figures rendered purely from the CSV files the experiments emit.

Rendering is deterministic: the Agg backend is forced, SVG ids are salted
with a fixed string and the date metadata is dropped, so identical CSVs give
byte-identical SVGs.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "aolsim"
matplotlib.rcParams["svg.fonttype"] = "none"

SERIES_LABELS = {"dl_aol": "DL-AoL", "ul_aol": "UL-AoL", "dl_aoi": "DL-AoI", "ul_aoi": "UL-AoI"}


def _rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_value_curve(csv_path, svg_path, abstraction: str = "dl_aol") -> None:
    """Reward (negated value) per age bin; unvisited bins are left out."""
    rows = [r for r in _rows(csv_path) if r.get("abstraction", abstraction) == abstraction]
    mid = [(float(r["bin_low_ms"]) + float(r["bin_high_ms"])) / 2 for r in rows]
    val = [float(r["value"]) if r["value"] not in ("", "nan") else np.nan for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(mid, val, marker="o", ms=3)
    ax.set_xlabel(f"{SERIES_LABELS.get(abstraction, abstraction)} (ms)")
    ax.set_ylabel("expected reward  (-V)")
    ax.grid(alpha=0.3)
    _save(fig, svg_path)


def plot_td_error(csv_path, svg_path, window: int = 10) -> None:
    """Per-episode mean |TD error|, one line per abstraction, smoothed by a trailing mean."""
    series = defaultdict(list)
    for r in _rows(csv_path):
        series[r["abstraction"]].append((int(r["episode"]), float(r["mean_abs_td_error"])))
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for name, pts in series.items():
        pts.sort()
        y = np.array([p[1] for p in pts])
        k = max(1, min(window, len(y)))
        smooth = np.convolve(y, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(k - 1, len(y)), smooth, label=SERIES_LABELS.get(name, name))
    ax.set_xlabel("episode")
    ax.set_ylabel("mean |TD error|")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, svg_path)


def plot_train_log(csv_path, svg_path, window: int = 50) -> None:
    rows = _rows(csv_path)
    ep = np.array([int(r["episode"]) for r in rows])
    cost = np.array([float(r["mean_stage_cost"]) for r in rows])
    eps = np.array([float(r["eps"]) for r in rows])
    k = max(1, min(window, len(cost)))
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(ep[k - 1 :], np.convolve(cost, np.ones(k) / k, mode="valid"), label="mean stage cost")
    ax.set_xlabel("episode")
    ax.set_ylabel("mean stage cost")
    ax2 = ax.twinx()
    ax2.plot(ep, eps, color="grey", ls="--", label="epsilon")
    ax2.set_ylabel("epsilon")
    ax.grid(alpha=0.3)
    _save(fig, svg_path)


def plot_comparison(csv_path, svg_path, column: str, ylabel: str) -> None:
    """Grouped bars: one group per sensing period, one bar per method."""
    rows = [r for r in _rows(csv_path) if r["dt_in_ms"] != "all"]
    methods = list(dict.fromkeys(r["method"] for r in rows))
    groups = sorted({r["dt_in_ms"] for r in rows}, key=float)
    table = {(r["method"], r["dt_in_ms"]): r for r in rows}
    width = 0.8 / max(1, len(methods))
    x = np.arange(len(groups))
    fig, ax = plt.subplots(figsize=(7, 3.8))
    for i, m in enumerate(methods):
        y = [float(table[(m, g)][column]) for g in groups]
        err = [float(table[(m, g)].get(column + "_ci", 0.0) or 0.0) for g in groups]
        ax.bar(x + (i - (len(methods) - 1) / 2) * width, y, width, yerr=err, label=m, capsize=2)
    ax.set_xticks(x)
    ax.set_xticklabels([f"{float(g):g}" for g in groups])
    ax.set_xlabel("sensing period (ms)")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize="small")
    ax.grid(axis="y", alpha=0.3)
    _save(fig, svg_path)


def render_dir(out: Path) -> list[Path]:
    """Re-render every figure whose source CSV is present in ``out``."""
    out = Path(out)
    made = []
    jobs = [
        ("value_curve.csv", "value_curve.svg", lambda c, s: plot_value_curve(c, s)),
        ("td_error.csv", "td_error.svg", lambda c, s: plot_td_error(c, s)),
        ("train_log.csv", "train_log.svg", lambda c, s: plot_train_log(c, s)),
        ("comparison.csv", "bandwidth.svg", lambda c, s: plot_comparison(c, s, "bw_norm", "total bandwidth (sum b/b_max)")),
        ("comparison.csv", "lqr_cost.svg", lambda c, s: plot_comparison(c, s, "lqr_cost", "total LQR cost")),
    ]
    for src, dst, fn in jobs:
        if (out / src).exists():
            fn(out / src, out / dst)
            made.append(out / dst)
    return made
