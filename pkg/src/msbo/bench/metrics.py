"""Regret, percentile and cross-seed aggregation of campaign traces."""

from __future__ import annotations

import math

import numpy as np

REGRET_FLOOR = 1e-12
GRID_POINTS = 200


def compute_regret(best_values, y_opt_ref: float) -> np.ndarray:
    """Natural-log simple regret ``ln |y_ref - y*|`` per event, floored at ``ln(1e-12)``."""
    if not math.isfinite(y_opt_ref):
        raise ValueError("regret reference must be finite")
    best = np.asarray(best_values, dtype=float)
    return np.log(np.maximum(np.abs(y_opt_ref - best), REGRET_FLOOR))


def compute_percentile(best_values, objective_values) -> np.ndarray:
    """Rank of each best-found value among all candidates, as a fraction (top candidate -> 1/P)."""
    obj = np.sort(np.asarray(objective_values, dtype=float))
    p = obj.size
    best = np.asarray(best_values, dtype=float)
    # candidates at least as good as the best found
    n_better_or_equal = p - np.searchsorted(obj, best, side="left")
    return np.maximum(n_better_or_equal, 1) / p


def cost_grid(start: float, stop: float, n: int = GRID_POINTS) -> np.ndarray:
    return np.linspace(start, stop, n)


def step_interpolate(costs, values, grid) -> np.ndarray:
    """Value of the last event at or before each grid cost (carry forward)."""
    costs = np.asarray(costs, dtype=float)
    values = np.asarray(values, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if grid.size and grid[-1] > costs[-1] + 1e-9:
        raise ValueError(f"cost grid reaches {grid[-1]} but the trace stops at {costs[-1]}")
    if grid.size and grid[0] < costs[0] - 1e-9:
        raise ValueError(f"cost grid starts at {grid[0]} before the first event at {costs[0]}")
    idx = np.searchsorted(costs, grid + 1e-9, side="right") - 1
    return values[np.clip(idx, 0, None)]


def aggregate(traces, grid) -> tuple[np.ndarray, np.ndarray]:
    """Mean and sample std (ddof=1) over seeds on a common cost grid.

    ``traces`` is a sequence of ``(costs, values)`` pairs.
    """
    if len(traces) < 2:
        raise ValueError("aggregation needs at least two traces")
    stacked = np.array([step_interpolate(c, v, grid) for c, v in traces])
    return stacked.mean(axis=0), stacked.std(axis=0, ddof=1)
