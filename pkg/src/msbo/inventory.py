"""Cascade schema, per-sample records and the resumable inventory.

The inventory is the single source of truth about which stages each sample
has been through. It can be mirrored to a line-delimited event log so an
interrupted campaign can be resumed by replaying the log.

Event log layout (tab separated, one event per line)::

    schema   <json>
    create   <sample_id>  0        <params>  -                 0    <origin>  <iteration>
    record   <sample_id>  <stage>  <params>  <measurement>     <cost>

``params`` and ``measurement`` are comma-separated floats written with
``repr`` (shortest round-trip form), so replay is bit exact. An empty
parameter vector is written as ``-``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class SurrogateMode(str, Enum):
    STANDARD = "standard"
    RESIDUAL = "residual"


class Origin(str, Enum):
    INIT_DESIGN = "init_design"
    ACQUISITION = "acquisition"


class InventoryError(ValueError):
    pass


@dataclass(frozen=True)
class CascadeSchema:
    """Declarative description of an N-stage cascade.

    ``observed`` holds, per stage, the 0-based indices of the latent output
    components that are measured (the diagonal of the binary mask).
    Stage 1 must have at least one controllable parameter; later stages may
    have none (e.g. a dataset task whose second stage is a fixed assay).
    """

    x_dims: tuple[int, ...]
    h_dims: tuple[int, ...]
    observed: tuple[tuple[int, ...], ...]
    costs: tuple[float, ...]
    surrogate_mode: SurrogateMode = SurrogateMode.STANDARD

    def __post_init__(self):
        object.__setattr__(self, "x_dims", tuple(int(v) for v in self.x_dims))
        object.__setattr__(self, "h_dims", tuple(int(v) for v in self.h_dims))
        object.__setattr__(self, "observed", tuple(tuple(int(j) for j in o) for o in self.observed))
        object.__setattr__(self, "costs", tuple(float(c) for c in self.costs))
        object.__setattr__(self, "surrogate_mode", SurrogateMode(self.surrogate_mode))
        n = len(self.x_dims)
        if n < 1:
            raise ValueError("a cascade needs at least one stage")
        if not (len(self.h_dims) == len(self.observed) == len(self.costs) == n):
            raise ValueError("per-stage fields must all have length n_stages")
        if self.x_dims[0] < 1 or any(v < 0 for v in self.x_dims):
            raise ValueError("stage 1 needs >= 1 parameter and no stage may have a negative count")
        if any(v < 1 for v in self.h_dims):
            raise ValueError("latent dims must be >= 1")
        for i, (obs, h) in enumerate(zip(self.observed, self.h_dims)):
            if not obs:
                raise ValueError(f"stage {i + 1} observes nothing")
            if len(set(obs)) != len(obs) or min(obs) < 0 or max(obs) >= h:
                raise ValueError(f"stage {i + 1} observed indices out of range")
        if len(self.observed[-1]) != 1:
            raise ValueError("the final stage must have exactly one observed output")
        if any(not (c > 0 and math.isfinite(c)) for c in self.costs):
            raise ValueError("stage costs must be positive")

    @classmethod
    def fully_observed(cls, x_dims, h_dims, costs=None, surrogate_mode="standard") -> "CascadeSchema":
        costs = (1.0,) * len(x_dims) if costs is None else costs
        return cls(tuple(x_dims), tuple(h_dims), tuple(tuple(range(h)) for h in h_dims), tuple(costs),
                   SurrogateMode(surrogate_mode))

    @property
    def n_stages(self) -> int:
        return len(self.x_dims)

    @property
    def obs_dims(self) -> tuple[int, ...]:
        return tuple(len(o) for o in self.observed)

    @property
    def total_x_dim(self) -> int:
        return sum(self.x_dims)

    @property
    def full_cost(self) -> float:
        return float(sum(self.costs))

    def cost(self, stage: int) -> float:
        return self.costs[stage - 1]

    def x_offsets(self) -> list[int]:
        """Start offset of each stage's parameters in the joint parameter vector."""
        return list(np.cumsum((0,) + self.x_dims)[:-1])

    def split_joint(self, x_joint: Sequence[float], start_stage: int = 1) -> list[np.ndarray]:
        """Split a joint vector for stages ``start_stage..N`` into per-stage parts."""
        x_joint = np.asarray(x_joint, dtype=float)
        parts, k = [], 0
        for dim in self.x_dims[start_stage - 1:]:
            parts.append(x_joint[k:k + dim])
            k += dim
        if k != x_joint.shape[-1]:
            raise InventoryError("joint parameter vector has the wrong length")
        return parts

    def with_costs(self, costs: Sequence[float]) -> "CascadeSchema":
        return CascadeSchema(self.x_dims, self.h_dims, self.observed, tuple(costs), self.surrogate_mode)

    def with_mode(self, mode) -> "CascadeSchema":
        return CascadeSchema(self.x_dims, self.h_dims, self.observed, self.costs, SurrogateMode(mode))

    def normalised(self) -> "CascadeSchema":
        """Same schema with costs rescaled so one full cascade costs 1."""
        total = sum(self.costs)
        return self.with_costs([c / total for c in self.costs])

    def to_json(self) -> str:
        return json.dumps({
            "x_dims": list(self.x_dims),
            "h_dims": list(self.h_dims),
            "observed": [list(o) for o in self.observed],
            "costs": [repr(c) for c in self.costs],
            "surrogate_mode": self.surrogate_mode.value,
        })

    @classmethod
    def from_json(cls, text: str) -> "CascadeSchema":
        data = json.loads(text)
        return cls(
            tuple(data["x_dims"]),
            tuple(data["h_dims"]),
            tuple(tuple(o) for o in data["observed"]),
            tuple(float(c) for c in data["costs"]),
            SurrogateMode(data["surrogate_mode"]),
        )


@dataclass
class SampleRecord:
    sample_id: int
    params: list[np.ndarray] = field(default_factory=list)
    measurements: list[np.ndarray] = field(default_factory=list)
    pending_params: np.ndarray | None = None
    accumulated_cost: float = 0.0
    origin: Origin = Origin.ACQUISITION
    iteration_created: int = 0

    @property
    def stages_completed(self) -> int:
        return len(self.measurements)

    def last_measurement(self) -> np.ndarray | None:
        return self.measurements[-1] if self.measurements else None

    def joint_params(self) -> np.ndarray:
        return np.concatenate(self.params) if self.params else np.zeros(0)


def _fmt(values: Iterable[float]) -> str:
    values = list(values)
    if not values:
        return "-"
    return ",".join(repr(float(v)) for v in values)


def _parse(text: str) -> np.ndarray:
    if text == "-":
        return np.zeros(0)
    return np.array([float(v) for v in text.split(",")], dtype=np.float64)


class Inventory:
    """Registry of every sample, partially or fully processed.

    If ``log_path`` is given, every event is appended to that file as it
    happens (the file is created with a schema header when missing).
    """

    def __init__(self, schema: CascadeSchema, log_path: str | os.PathLike | None = None):
        self.schema = schema
        self.records: dict[int, SampleRecord] = {}
        self.total_cost_spent = 0.0
        self._next_id = 0
        self._best: tuple[float, int] | None = None
        self._events: list[str] = []
        self._log_path = Path(log_path) if log_path is not None else None
        self._emit("schema\t" + schema.to_json())

    # -- events ---------------------------------------------------------
    def _emit(self, line: str) -> None:
        self._events.append(line)
        if self._log_path is not None:
            with open(self._log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def events(self) -> list[str]:
        return list(self._events)

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text("\n".join(self._events) + "\n", encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def replay(cls, lines: Iterable[str]) -> "Inventory":
        inv = None
        for raw in lines:
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            kind = fields[0]
            if kind == "schema":
                inv = cls(CascadeSchema.from_json(fields[1]))
                continue
            if inv is None:
                raise InventoryError("event log does not start with a schema line")
            if kind == "create":
                sid = int(fields[1])
                inv._create(_parse(fields[3]), Origin(fields[6]), int(fields[7]), sample_id=sid)
            elif kind == "record":
                inv.record_measurement(int(fields[1]), int(fields[2]), _parse(fields[3]), _parse(fields[4]))
            else:
                raise InventoryError(f"unknown event kind {kind!r}")
        if inv is None:
            raise InventoryError("empty event log")
        return inv

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Inventory":
        with open(path, encoding="utf-8") as fh:
            return cls.replay(fh)

    # -- operations -----------------------------------------------------
    def create_sample(self, params_1, origin: Origin = Origin.ACQUISITION, iteration: int = 0) -> int:
        """Register a new sample with its stage-1 parameters staged."""
        return self._create(np.asarray(params_1, dtype=np.float64), Origin(origin), iteration)

    def _create(self, params_1: np.ndarray, origin: Origin, iteration: int, sample_id: int | None = None) -> int:
        self._check_params(1, params_1)
        sid = self._next_id if sample_id is None else sample_id
        if sid in self.records:
            raise InventoryError(f"duplicate sample id {sid}")
        self._next_id = max(self._next_id, sid + 1)
        self.records[sid] = SampleRecord(sid, pending_params=params_1.copy(), origin=origin,
                                         iteration_created=iteration)
        self._emit(f"create\t{sid}\t0\t{_fmt(params_1)}\t-\t{repr(0.0)}\t{origin.value}\t{iteration}")
        return sid

    def _check_params(self, stage: int, params: np.ndarray) -> None:
        if params.ndim != 1 or params.shape[0] != self.schema.x_dims[stage - 1]:
            raise InventoryError(
                f"stage {stage} expects {self.schema.x_dims[stage - 1]} parameters, got shape {params.shape}")
        if not np.all(np.isfinite(params)) or np.any(params < 0.0) or np.any(params > 1.0):
            raise InventoryError(f"stage {stage} parameters must lie in [0, 1]")

    def record_measurement(self, sample_id: int, stage: int, params, measurement) -> SampleRecord:
        """Append the result of running ``stage`` on a sample."""
        if sample_id not in self.records:
            raise InventoryError(f"unknown sample id {sample_id}")
        rec = self.records[sample_id]
        if not (1 <= stage <= self.schema.n_stages) or stage != rec.stages_completed + 1:
            raise InventoryError(
                f"sample {sample_id} has completed {rec.stages_completed} stages; cannot record stage {stage}")
        params = np.asarray(params, dtype=np.float64).ravel()
        measurement = np.asarray(measurement, dtype=np.float64).ravel()
        self._check_params(stage, params)
        if stage == 1 and rec.pending_params is not None and not np.array_equal(params, rec.pending_params):
            raise InventoryError("stage-1 parameters differ from the ones staged at creation")
        n_obs = self.schema.obs_dims[stage - 1]
        if measurement.shape[0] != n_obs:
            raise InventoryError(f"stage {stage} expects {n_obs} measured values, got {measurement.shape[0]}")
        if not np.all(np.isfinite(measurement)):
            raise InventoryError("measurements must be finite")
        cost = self.schema.cost(stage)
        rec.params.append(params.copy())
        rec.measurements.append(measurement.copy())
        rec.pending_params = None
        rec.accumulated_cost += cost
        self.total_cost_spent += cost
        if stage == self.schema.n_stages:
            y = float(measurement[0])
            b = self._best
            if b is None or y > b[0] or (y == b[0] and sample_id < b[1]):
                self._best = (y, sample_id)
        self._emit(f"record\t{sample_id}\t{stage}\t{_fmt(params)}\t{_fmt(measurement)}\t{repr(cost)}")
        return rec

    def continuation_candidates(self, stage: int) -> list[tuple[int, np.ndarray]]:
        """Samples that can run ``stage`` next, with their latest measurement."""
        if not (2 <= stage <= self.schema.n_stages):
            raise InventoryError(f"continuation stage must be in [2, {self.schema.n_stages}]")
        return [(sid, rec.measurements[-1]) for sid, rec in sorted(self.records.items())
                if rec.stages_completed == stage - 1]

    def completed(self) -> list[SampleRecord]:
        n = self.schema.n_stages
        return [rec for _, rec in sorted(self.records.items()) if rec.stages_completed == n]

    def best_observed(self) -> tuple[float, int] | None:
        """Best terminal objective and its sample id (lowest id wins ties)."""
        return self._best

    def stage_execution_counts(self) -> np.ndarray:
        counts = np.zeros(self.schema.n_stages, dtype=int)
        for rec in self.records.values():
            counts[: rec.stages_completed] += 1
        return counts

    def stage_sampling_frequencies(self) -> np.ndarray:
        counts = self.stage_execution_counts()
        total = counts.sum()
        if total == 0:
            return np.full(self.schema.n_stages, 1.0 / self.schema.n_stages)
        return counts / total

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, sample_id: int) -> SampleRecord:
        return self.records[sample_id]

    def __iter__(self):
        return iter(rec for _, rec in sorted(self.records.items()))
