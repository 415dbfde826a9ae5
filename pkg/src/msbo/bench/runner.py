"""Run multi-seed, multi-driver experiments and write their outputs.

Output directory layout::

    traces/<driver>_seed<k>.csv       one row per executed stage
    inventories/<driver>_seed<k>.log  replayable inventory event log
    aggregate.csv                     cost grid x driver: mean and sample std of the metric
    manifest.json                     config echo, seeds, reference value, versions

All files are written once, atomically, and contain no timestamps, so a rerun
with the same config reproduces them byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from ..drivers import (CampaignConfig, CampaignTrace, DatasetEnvironment, SyntheticEnvironment, run_campaign,
                       traces_to_csv)
from ..synthetic import cached_preset_cascade, preset
from . import metrics
from .config import ExperimentConfig
from .dataset import load_dataset_task

AGGREGATE_COLUMNS = ("cost", "driver", "mean", "std", "n_seeds")


def write_atomic(path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _task(cfg: ExperimentConfig):
    if cfg.dataset is not None:
        return load_dataset_task(cfg.dataset, costs=cfg.stage_costs(2), minimise=cfg.minimise)
    return cached_preset_cascade(cfg.preset, cfg.generator_seed)


def make_environment(cfg: ExperimentConfig, seed: int, task=None):
    task = _task(cfg) if task is None else task
    if cfg.dataset is not None:
        return DatasetEnvironment(task, costs=cfg.stage_costs(2))
    return SyntheticEnvironment(task, costs=cfg.stage_costs(task.n_stages), noise_seed=seed,
                                surrogate_mode=cfg.surrogate_mode)


def campaign_config(cfg: ExperimentConfig, driver: str, seed: int) -> CampaignConfig:
    min_freq = cfg.min_stage_frequency
    if min_freq is None and cfg.preset is not None:
        min_freq = preset(cfg.preset).min_stage_frequency
    return CampaignConfig(budget=cfg.budget, seed=seed, driver=driver, init_size=cfg.init_size,
                          mc_samples=cfg.mc_samples, restarts=cfg.restarts,
                          min_stage_frequency=tuple(min_freq) if min_freq is not None else None,
                          cost_weighting=cfg.cost_weighting, surrogate_mode=cfg.surrogate_mode)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict[tuple[str, int], CampaignTrace]:
    task = _task(cfg)
    jobs = [(driver, seed) for driver in cfg.drivers for seed in cfg.seeds]

    def one(job):
        driver, seed = job
        return run_campaign(make_environment(cfg, seed, task), campaign_config(cfg, driver, seed))

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(job) for job in jobs]
    traces = dict(zip(jobs, results))
    if out_dir is not None:
        write_outputs(cfg, traces, Path(out_dir), task)
    return traces


def metric_values(cfg: ExperimentConfig, trace: CampaignTrace, task) -> np.ndarray:
    if cfg.metric == "percentile":
        values = trace.best_observed
        out = np.full(values.shape, np.nan)
        ok = ~np.isnan(values)
        out[ok] = metrics.compute_percentile(values[ok], task.objective)
        return out
    return trace.log_regret()


def aggregate_rows(cfg: ExperimentConfig, traces, task, grid_points: int = metrics.GRID_POINTS) -> list[dict]:
    if len(cfg.seeds) < 2:
        return []
    first = next(iter(traces.values()))
    schema = first.inventory.schema
    start = CampaignConfig(budget=cfg.budget, init_size=cfg.init_size).design_size(schema) * schema.full_cost
    stop = min(min(t.costs[-1] for t in traces.values()), cfg.budget)
    if stop < start:
        return []
    grid = metrics.cost_grid(start, stop, grid_points)
    rows = []
    for driver in cfg.drivers:
        series = []
        for seed in cfg.seeds:
            t = traces[(driver, seed)]
            vals = metric_values(cfg, t, task)
            ok = ~np.isnan(vals)
            series.append((t.costs[ok], vals[ok]))
        mean, std = metrics.aggregate(series, grid)
        rows += [{"cost": g, "driver": driver, "mean": m, "std": s, "n_seeds": len(series)}
                 for g, m, s in zip(grid, mean, std)]
    return rows


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(float(row[c])) if isinstance(row[c], (float, np.floating)) else row[c]
                         for c in columns])
    return buf.getvalue()


def write_outputs(cfg: ExperimentConfig, traces, out: Path, task) -> None:
    files = []
    for (driver, seed), trace in sorted(traces.items()):
        name = f"traces/{driver}_seed{seed}.csv"
        write_atomic(out / name, traces_to_csv([trace]))
        log = f"inventories/{driver}_seed{seed}.log"
        write_atomic(out / log, "\n".join(trace.inventory.events()) + "\n")
        files += [name, log]
    write_atomic(out / "aggregate.csv", _csv(aggregate_rows(cfg, traces, task), AGGREGATE_COLUMNS))
    first = next(iter(traces.values()))
    schema = first.inventory.schema
    manifest = {
        "config": cfg.to_dict(),
        "seeds": cfg.seeds,
        "drivers": cfg.drivers,
        "stage_costs": list(schema.costs),
        "regret_reference": first.reference,
        "files": sorted(files) + ["aggregate.csv"],
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    if cfg.preset is not None:
        manifest["optimum"] = {"y_opt": task.y_opt, "x_opt": [float(v) for v in task.x_opt]}
    write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_traces(in_dir) -> dict[str, list[dict]]:
    """Trace rows grouped by driver, read back from a results directory."""
    by_driver: dict[str, list[list[dict]]] = {}
    for path in sorted(Path(in_dir, "traces").glob("*.csv")):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            by_driver.setdefault(rows[0]["driver"], []).append(rows)
    return by_driver


def _num(text: str) -> float:
    return float(text) if text != "" else math.nan


def summarise(in_dir) -> list[dict]:
    """Final best value and log regret per driver, across seeds."""
    out = []
    for driver, traces in sorted(read_traces(in_dir).items()):
        finals = [t[-1] for t in traces]
        lr = np.array([_num(r["log_regret"]) for r in finals])
        best = np.array([_num(r["best_observed_y"]) for r in finals])
        sel = np.array([_num(r["model_selected_y"]) for r in finals])
        out.append({
            "driver": driver,
            "n_seeds": len(finals),
            "final_cost_mean": float(np.mean([_num(r["cumulative_cost"]) for r in finals])),
            "final_best_observed_mean": float(np.mean(best)),
            "final_model_selected_mean": float(np.nanmean(sel)) if np.any(~np.isnan(sel)) else math.nan,
            "final_log_regret_median": float(np.median(lr)),
            "final_log_regret_mean": float(np.mean(lr)),
            "final_log_regret_std": float(np.std(lr, ddof=1)) if len(lr) > 1 else math.nan,
        })
    return out


def with_overrides(cfg: ExperimentConfig, seeds=None, budget=None, driver=None) -> ExperimentConfig:
    changes = {}
    if seeds is not None:
        changes["seeds"] = list(seeds)
    if budget is not None:
        changes["budget"] = float(budget)
    if driver is not None:
        changes["drivers"] = [driver]
    return replace(cfg, **changes)
