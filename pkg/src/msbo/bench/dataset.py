"""Discrete two-stage tasks read from precomputed feature tables.

File format: CSV with header ``id,f_1,...,f_d,proxy,objective``. Features are
min-max scaled to [0, 1] per column on load (constant columns map to 0.5).
Minimisation tasks are negated so everything downstream maximises.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass
class DatasetTask:
    ids: list[str]
    features: np.ndarray
    proxy: np.ndarray
    objective: np.ndarray
    costs: tuple[float, float] = (0.5, 0.5)
    minimise: bool = False
    raw_features: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _scale_columns(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = hi - lo
    out = np.full_like(x, 0.5)
    ok = span > 0
    out[:, ok] = (x[:, ok] - lo[ok]) / span[ok]
    return np.clip(out, 0.0, 1.0)


def load_dataset_task(path, costs=(0.5, 0.5), minimise: bool = False) -> DatasetTask:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        rows = [(k + 2, row) for k, row in enumerate(reader) if any(cell.strip() for cell in row)]

    if len(header) < 4 or header[0] != "id" or header[-2:] != ["proxy", "objective"]:
        raise DatasetError(f"{path}: header must be id,f_1..f_d,proxy,objective")
    d = len(header) - 3
    expected = [f"f_{j}" for j in range(1, d + 1)]
    if header[1:-2] != expected:
        raise DatasetError(f"{path}: feature columns must be named {','.join(expected)}")
    if not rows:
        raise DatasetError(f"{path}: no data rows")

    ids, values = [], []
    for line_no, row in rows:
        if len(row) != d + 3:
            raise DatasetError(f"{path}: row {line_no} has {len(row)} fields, expected {d + 3}")
        try:
            nums = [float(cell) for cell in row[1:]]
        except ValueError as exc:
            raise DatasetError(f"{path}: row {line_no} (id {row[0].strip()}): {exc}") from None
        bad = [header[j + 1] for j, v in enumerate(nums) if not math.isfinite(v)]
        if bad:
            raise DatasetError(f"{path}: row {line_no} (id {row[0].strip()}) has non-finite {', '.join(bad)}")
        ids.append(row[0].strip())
        values.append(nums)

    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DatasetError(f"{path}: duplicate ids {', '.join(dup)}")
    data = np.array(values, dtype=float)
    raw = data[:, :d]
    groups: dict[bytes, list[str]] = {}
    for i, row in zip(ids, raw):
        groups.setdefault(row.tobytes(), []).append(i)
    dups = [g for g in groups.values() if len(g) > 1]
    if dups:
        listing = "; ".join(",".join(g) for g in dups)
        raise DatasetError(f"{path}: duplicate feature rows for ids {listing}")

    features = _scale_columns(raw)
    if len({row.tobytes() for row in features}) != len(ids):
        raise DatasetError(f"{path}: feature rows collide after scaling")
    objective = data[:, d + 1]
    if minimise:
        objective = -objective
    costs = tuple(float(c) for c in costs)
    if len(costs) != 2 or min(costs) <= 0:
        raise DatasetError("dataset tasks need two positive stage costs")
    return DatasetTask(ids, features, data[:, d].copy(), objective.copy(), costs, minimise, raw)
