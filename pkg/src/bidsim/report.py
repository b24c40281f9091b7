"""Delimited outputs and the figures rendered next to them.

Metrics rows (run_id, seed, step, group, metric, value) are the common
currency: training writes them, the report path aggregates them across
seeds and renders learning-curve figures. Grid rows get heatmap figures
over the (b0, ratio) plane. All figures go to PNG files; nothing opens
a display.
"""

import csv
import os
import re
from collections import defaultdict
from typing import Dict, List, Optional, Sequence

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

METRICS_HEADER = ("run_id", "seed", "step", "group", "metric", "value")
AGGREGATE_HEADER = ("label", "group", "metric", "step", "mean", "std", "count")
TRACE_HEADER = (
    "step", "agent_id", "bid", "win", "payment", "value", "remaining_budget",
)


def write_metrics_csv(path: str, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRICS_HEADER})


def read_metrics_csv(path: str) -> List[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header in {path}")
        for raw in reader:
            rows.append({
                "run_id": raw["run_id"],
                "seed": int(raw["seed"]),
                "step": int(raw["step"]),
                "group": raw["group"],
                "metric": raw["metric"],
                "value": float(raw["value"]),
            })
    return rows


def run_label(run_id: str) -> str:
    """Run id with its trailing seed marker removed, for cross-seed grouping."""
    return re.sub(r"-s\d+$", "", run_id)


def aggregate_metrics(rows: Sequence[dict]) -> List[dict]:
    """Mean and std across seeds for each (label, group, metric, step)."""
    grouped: Dict[tuple, list] = defaultdict(list)
    for row in rows:
        key = (run_label(row["run_id"]), row["group"], row["metric"], row["step"])
        grouped[key].append(row["value"])
    out = []
    for key in sorted(grouped):
        values = np.asarray(grouped[key], dtype=float)
        label, group, metric, step = key
        out.append({
            "label": label,
            "group": group,
            "metric": metric,
            "step": step,
            "mean": float(values.mean()),
            "std": float(values.std(ddof=1)) if values.size > 1 else 0.0,
            "count": int(values.size),
        })
    return out


def write_aggregate_csv(path: str, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=AGGREGATE_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in AGGREGATE_HEADER})


def write_episode_trace(path: str, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in TRACE_HEADER})


def plot_metric_curves(
    rows: Sequence[dict], metric: str, path: str, title: Optional[str] = None
) -> None:
    """One line per (run label, group), seed-averaged, over training steps."""
    series: Dict[tuple, Dict[int, list]] = defaultdict(lambda: defaultdict(list))
    for row in rows:
        if row["metric"] != metric:
            continue
        series[(run_label(row["run_id"]), row["group"])][row["step"]].append(row["value"])
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (label, group) in sorted(series):
        by_step = series[(label, group)]
        steps = sorted(by_step)
        means = [float(np.mean(by_step[s])) for s in steps]
        name = label if group == "all" else f"{label} [{group}]"
        ax.plot(steps, means, marker="o", markersize=3, label=name)
    ax.set_xlabel("environment steps")
    ax.set_ylabel(metric)
    ax.set_title(title or metric)
    ax.grid(True, alpha=0.3)
    if series:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_grid_heatmaps(rows: Sequence[dict], value_key: str, path: str) -> None:
    """Per-method heatmaps of a grid quantity over (b0, ratio), seed-averaged."""
    methods = sorted({row["method"] for row in rows})
    b0s = sorted({row["b0"] for row in rows})
    ratios = sorted({row["ratio"] for row in rows})
    fig, axes = plt.subplots(
        1, max(len(methods), 1), figsize=(4.2 * max(len(methods), 1), 3.6),
        squeeze=False,
    )
    for k, method in enumerate(methods):
        mat = np.full((len(b0s), len(ratios)), np.nan)
        for i, b0 in enumerate(b0s):
            for j, ratio in enumerate(ratios):
                vals = [
                    row[value_key] for row in rows
                    if row["method"] == method
                    and row["b0"] == b0 and row["ratio"] == ratio
                ]
                if vals:
                    mat[i, j] = float(np.mean(vals))
        ax = axes[0][k]
        im = ax.imshow(mat, origin="lower", aspect="auto", cmap="viridis")
        ax.set_xticks(range(len(ratios)), [f"{r:g}" for r in ratios])
        ax.set_yticks(range(len(b0s)), [f"{b:g}" for b in b0s])
        ax.set_xlabel("agent 1 budget share")
        ax.set_ylabel("budget scale b0")
        ax.set_title(f"{method}: {value_key}")
        fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_bid_trace(bid_trace: Sequence[dict], path: str, title: str = "") -> None:
    """Per-agent mean bid (solid) and bar level (dashed) across episodes."""
    if not bid_trace:
        raise ValueError("empty bid trace")
    episodes = [t["episode"] for t in bid_trace]
    bids = np.stack([t["mean_bids"] for t in bid_trace])
    bars = None
    if bid_trace[0].get("mean_bars") is not None:
        bars = np.stack([t["mean_bars"] for t in bid_trace])
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for i in range(bids.shape[1]):
        line, = ax.plot(episodes, bids[:, i], label=f"agent {i + 1} bid")
        if bars is not None:
            ax.plot(episodes, bars[:, i], linestyle="--",
                    color=line.get_color(), alpha=0.7,
                    label=f"agent {i + 1} bar")
    ax.set_xlabel("training episode")
    ax.set_ylabel("mean level")
    ax.set_title(title or "bids and bars during training")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(
    metrics_paths: Sequence[str],
    out_dir: str,
    grid_path: Optional[str] = None,
) -> List[str]:
    """Aggregate CSVs and figures for the report path; returns written files."""
    from .grid import read_grid_csv

    os.makedirs(out_dir, exist_ok=True)
    written = []
    rows = []
    for p in metrics_paths:
        rows.extend(read_metrics_csv(p))
    if rows:
        agg_path = os.path.join(out_dir, "metrics_aggregate.csv")
        write_aggregate_csv(agg_path, aggregate_metrics(rows))
        written.append(agg_path)
        for metric in sorted({r["metric"] for r in rows}):
            fig_path = os.path.join(out_dir, f"curve_{metric}.png")
            plot_metric_curves(rows, metric, fig_path)
            written.append(fig_path)
    if grid_path is not None:
        grid_rows = read_grid_csv(grid_path)
        for key in ("agent1_value", "social_welfare", "revenue"):
            fig_path = os.path.join(out_dir, f"grid_{key}.png")
            plot_grid_heatmaps(grid_rows, key, fig_path)
            written.append(fig_path)
    return written
