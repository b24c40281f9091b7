"""Two-agent budget grid experiment.

Sweeps budget scale b0 and agent 1's budget share over a method list,
training one run per (method, b0, ratio, seed) cell and recording raw
end-of-training evaluation numbers. Cells are independent, so they can
optionally run in worker processes.
"""

import csv
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Sequence

from .agents import AgentKind, parse_kind
from .trainer import train_two_agent

GRID_B0 = (0.25, 0.5, 0.75, 1.0)
GRID_RATIOS = (0.3, 0.5, 0.7)
GRID_EPISODES = 5000

GRID_HEADER = (
    "method", "b0", "ratio", "seed", "agent1_value", "social_welfare", "revenue",
)


def _cell(args) -> dict:
    method, tau, bar, b0, ratio, seed, episodes = args
    kind = parse_kind(method, tau=tau, bar=bar)
    result = train_two_agent(
        kind, seed, episodes, b0, ratio, record_metrics=False
    )
    ev = result.final_eval
    return {
        "method": method,
        "b0": b0,
        "ratio": ratio,
        "seed": seed,
        "agent1_value": float(ev.raw_values[0]),
        "social_welfare": ev.raw_welfare,
        "revenue": ev.revenue,
    }


def run_grid(
    methods: Sequence[str],
    b0_values: Sequence[float] = GRID_B0,
    ratios: Sequence[float] = GRID_RATIOS,
    seeds: Sequence[int] = (0, 1, 2),
    episodes: int = GRID_EPISODES,
    tau: Optional[float] = None,
    bar: Optional[float] = None,
    workers: int = 1,
) -> List[dict]:
    """All grid cells, ordered by (method, b0, ratio, seed)."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    tasks = [
        (method, tau, bar, float(b0), float(ratio), int(seed), episodes)
        for method in methods
        for b0 in b0_values
        for ratio in ratios
        for seed in seeds
    ]
    if workers == 1:
        return [_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_cell, tasks))


def write_grid_csv(path: str, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=GRID_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in GRID_HEADER})


def read_grid_csv(path: str) -> List[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != GRID_HEADER:
            raise ValueError(f"unexpected grid header in {path}")
        for raw in reader:
            rows.append({
                "method": raw["method"],
                "b0": float(raw["b0"]),
                "ratio": float(raw["ratio"]),
                "seed": int(raw["seed"]),
                "agent1_value": float(raw["agent1_value"]),
                "social_welfare": float(raw["social_welfare"]),
                "revenue": float(raw["revenue"]),
            })
    return rows
