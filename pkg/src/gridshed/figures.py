"""Figure rendering for reports, traces, and learning curves.

Every figure lands as a PNG next to the delimited file it was drawn from and
carries the producing config hash in its PNG metadata, so a stray image can
always be traced back to the run that made it.
"""
from __future__ import annotations

import csv
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .report import ComparisonReport

__all__ = [
    "reward_diff_histogram",
    "trace_figure",
    "learning_curve_figure",
]


def _save(fig, path, config_hash: str) -> None:
    fig.savefig(path, dpi=120, metadata={"gridshed:config_hash": config_hash})
    plt.close(fig)


def reward_diff_histogram(report: ComparisonReport, path, *,
                          config_hash: str = "", bins: int = 40) -> None:
    """Histogram of per-scenario reward differences (policy − baseline)."""
    diffs = [r.reward_diff for r in report.rows]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.hist(diffs, bins=bins, color="#3465a4", edgecolor="black", linewidth=0.4)
    ax.axvline(0.0, color="crimson", linewidth=1.0)
    ax.set_xlabel("reward difference (policy − UVLS baseline)")
    ax.set_ylabel("scenarios")
    wins = sum(1 for d in diffs if d > 0)
    ax.set_title(f"{len(diffs)} scenarios, {wins} with positive difference")
    fig.tight_layout()
    _save(fig, path, config_hash)


def _read_trace(path) -> tuple[list[str], list[list[float]]]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = [[float(x) for x in row] for row in rd]
    return header, rows


def trace_figure(trace_csvs: Mapping[str, str], path, *, config_hash: str = "",
                 v_floor: float = 0.95) -> None:
    """Voltage and cumulative-shed timelines for one scenario, one trace file
    per controller (label -> CSV path)."""
    fig, (ax_v, ax_s) = plt.subplots(2, 1, figsize=(7.5, 6), sharex=True,
                                     height_ratios=[2, 1])
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for ci, (label, csv_path) in enumerate(sorted(trace_csvs.items())):
        header, rows = _read_trace(csv_path)
        t = [r[0] for r in rows]
        n_v = len(header) - 2  # t, v_..., mw_shed
        color = colors[ci % len(colors)]
        for j in range(1, 1 + n_v):
            ax_v.plot(t, [r[j] for r in rows], color=color, linewidth=0.7,
                      alpha=0.55, label=label if j == 1 else None)
        ax_s.step(t, [r[-1] for r in rows], where="post", color=color,
                  linewidth=1.4, label=label)
    ax_v.axhline(v_floor, color="gray", linewidth=0.8, linestyle="--")
    ax_v.set_ylabel("monitored bus voltage (pu)")
    ax_v.legend(loc="lower right", fontsize=8)
    ax_s.set_ylabel("cumulative MW shed")
    ax_s.set_xlabel("time (s)")
    ax_s.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path, config_hash)


def learning_curve_figure(curve_csv, path, *, config_hash: str = "") -> None:
    """Mean return over training iterations from a learning-curve CSV
    (columns: stage, iteration, mean_return, std_return, ...)."""
    stages: dict[str, tuple[list[int], list[float]]] = {}
    with open(curve_csv, newline="") as fh:
        rd = csv.DictReader(fh)
        for i, row in enumerate(rd):
            stage = row.get("stage", "train")
            xs, ys = stages.setdefault(stage, ([], []))
            xs.append(i)
            ys.append(float(row["mean_return"]))
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for stage, (xs, ys) in sorted(stages.items()):
        ax.plot(xs, ys, linewidth=1.2, label=stage)
    ax.set_xlabel("training iteration (cumulative)")
    ax.set_ylabel("mean minibatch return")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path, config_hash)
