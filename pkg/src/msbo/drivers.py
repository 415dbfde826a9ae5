"""Optimisation loops: MSBO with resumable sampling and three baselines.

Every driver talks to an :class:`Environment`, which runs single stages and
keeps the latent state of each sample to itself; the optimiser only sees
measurements, recorded in an :class:`~msbo.inventory.Inventory`.

A campaign trace has one event per executed stage. Costs are whatever the
environment's schema says; full-cascade drivers only start a cascade if it
finishes within ``budget + max stage cost``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from . import gp
from ._qmc import sobol
from .acquisition import (AcqKind, AcquisitionConfig, NoFeasibleProposal, candidate_proposals,
                          discrete_values, optimize_stage_continuous, select_next)
from .cascade import CascadeSurrogate, StageSurrogate, fit_from_inventory, predicted_means
from .inventory import CascadeSchema, Inventory, Origin

DRIVERS = ("msbo", "bo", "bofn", "random")
TRACE_COLUMNS = ("seed", "driver", "event_index", "stage_executed", "sample_id", "cumulative_cost",
                 "best_observed_y", "model_selected_y", "regret", "log_regret")
REGRET_FLOOR = 1e-12
_EPS = 1e-12


class BudgetError(ValueError):
    pass


class Environment(Protocol):
    schema: CascadeSchema

    def run_stage(self, sample_id: int, stage: int, params: np.ndarray) -> np.ndarray: ...

    def true_objective(self, x_joint: np.ndarray) -> float | None: ...


class SyntheticEnvironment:
    """Runs a :class:`~msbo.synthetic.SyntheticCascade` stage by stage.

    Noise for (sample, stage) comes from its own counter-based stream, so the
    same sample id sees the same noise whatever the execution order.
    """

    def __init__(self, cascade, costs=None, noise_seed: int = 0, surrogate_mode=None):
        self.cascade = cascade
        self.schema = cascade.schema(costs, surrogate_mode)
        self.noise_seed = noise_seed
        self._latent: dict[int, np.ndarray] = {}
        self._stage_done: dict[int, int] = {}

    def run_stage(self, sample_id: int, stage: int, params) -> np.ndarray:
        done = self._stage_done.get(sample_id, 0)
        if stage != done + 1:
            raise ValueError(f"sample {sample_id} is at stage {done}; cannot run stage {stage}")
        rng = np.random.default_rng([self.noise_seed, sample_id, stage])
        h, m = self.cascade.run_stage(stage, params, self._latent.get(sample_id), rng)
        self._latent[sample_id] = h
        self._stage_done[sample_id] = stage
        return m

    def true_objective(self, x_joint) -> float:
        return float(self.cascade.evaluate(np.asarray(x_joint, dtype=float)[None, :])[0])

    @property
    def has_noise(self) -> bool:
        cfg = self.cascade.config
        return any(s > 0 for s in cfg.process_noise_std) or cfg.measurement_noise_std[-1] > 0

    def regret_reference(self) -> float:
        """True optimum, shifted by three output-noise std devs when the process is noisy."""
        if self.has_noise:
            return self.cascade.noise_adjusted_optimum()
        return float(self.cascade.y_opt)


class DatasetEnvironment:
    """Two-stage discrete task: stage 1 reveals the proxy, stage 2 the objective.

    Stage-1 parameters are the candidate's feature vector; stage 2 has no
    parameters of its own.
    """

    def __init__(self, task, costs=None):
        self.task = task
        costs = tuple(task.costs) if costs is None else tuple(costs)
        self.schema = CascadeSchema((task.features.shape[1], 0), (1, 1), ((0,), (0,)), costs)
        self.pool = task.features
        self._index = {row.tobytes(): k for k, row in enumerate(self.pool)}
        self._candidate: dict[int, int] = {}

    def candidate_index(self, params) -> int:
        key = np.asarray(params, dtype=float).tobytes()
        if key not in self._index:
            raise ValueError("parameters are not a member of the candidate pool")
        return self._index[key]

    def run_stage(self, sample_id: int, stage: int, params) -> np.ndarray:
        if stage == 1:
            k = self.candidate_index(params)
            self._candidate[sample_id] = k
            return np.array([self.task.proxy[k]])
        return np.array([self.task.objective[self._candidate[sample_id]]])

    def true_objective(self, x_joint) -> float:
        d = self.pool.shape[1]
        return float(self.task.objective[self.candidate_index(np.asarray(x_joint)[:d])])

    def regret_reference(self) -> float:
        return float(np.max(self.task.objective))


@dataclass
class CampaignConfig:
    budget: float
    seed: int = 0
    driver: str = "msbo"
    init_size: int | None = None
    mc_samples: int = 64
    restarts: int = 8
    min_stage_frequency: tuple[float, ...] | None = None
    cost_weighting: bool = False
    surrogate_mode: str | None = None
    terminal: str = "analytic"
    min_stage_records: int = 2
    track_model_selection: bool = True

    def __post_init__(self):
        if self.driver not in DRIVERS:
            raise ValueError(f"unknown driver {self.driver!r}; expected one of {DRIVERS}")
        if self.min_stage_frequency is not None:
            self.min_stage_frequency = tuple(float(v) for v in self.min_stage_frequency)

    def acquisition(self) -> AcquisitionConfig:
        return AcquisitionConfig(mc_samples=self.mc_samples, restarts=self.restarts,
                                 cost_weighting=self.cost_weighting,
                                 min_stage_frequency=self.min_stage_frequency, terminal=self.terminal)

    def design_size(self, schema: CascadeSchema) -> int:
        return 2 * (schema.total_x_dim + 1) if self.init_size is None else self.init_size


@dataclass
class TraceEvent:
    event_index: int
    stage_executed: int
    sample_id: int
    cumulative_cost: float
    best_observed_y: float
    model_selected_y: float
    best_observed_true: float
    phase: str
    acq_kind: str = ""


@dataclass
class CampaignTrace:
    seed: int
    driver: str
    events: list[TraceEvent]
    inventory: Inventory
    reference: float | None = None
    model_selected_params: np.ndarray | None = None
    best_observed_params: np.ndarray | None = None

    @property
    def costs(self) -> np.ndarray:
        return np.array([e.cumulative_cost for e in self.events])

    @property
    def best_observed(self) -> np.ndarray:
        return np.array([e.best_observed_y for e in self.events])

    def log_regret(self) -> np.ndarray:
        return np.array([log_regret(self.reference, e.best_observed_y) for e in self.events])

    def final(self) -> TraceEvent:
        return self.events[-1]

    def rows(self) -> list[dict]:
        out = []
        for e in self.events:
            regret = math.nan
            if self.reference is not None and not math.isnan(e.best_observed_y):
                regret = abs(self.reference - e.best_observed_y)
            out.append({
                "seed": self.seed,
                "driver": self.driver,
                "event_index": e.event_index,
                "stage_executed": e.stage_executed,
                "sample_id": e.sample_id,
                "cumulative_cost": e.cumulative_cost,
                "best_observed_y": e.best_observed_y,
                "model_selected_y": e.model_selected_y,
                "regret": regret,
                "log_regret": log_regret(self.reference, e.best_observed_y),
            })
        return out

    def to_csv(self, header: bool = True) -> str:
        return traces_to_csv([self], header)


def log_regret(reference: float | None, best: float) -> float:
    if reference is None or math.isnan(best):
        return math.nan
    return math.log(max(abs(reference - best), REGRET_FLOOR))


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else repr(float(value))
    return str(value)


def traces_to_csv(traces, header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(TRACE_COLUMNS)
    for trace in traces:
        for row in trace.rows():
            writer.writerow([_fmt(row[c]) for c in TRACE_COLUMNS])
    return buf.getvalue()


# -- campaign bookkeeping ------------------------------------------------------------

class _Campaign:
    def __init__(self, env, config: CampaignConfig):
        self.env = env
        self.config = config
        schema = env.schema
        if config.surrogate_mode is not None:
            schema = schema.with_mode(config.surrogate_mode)
        self.inventory = Inventory(schema)
        self.events: list[TraceEvent] = []
        self.model_selected = math.nan
        self.model_selected_params = None
        self.pool = getattr(env, "pool", None)

    @property
    def schema(self) -> CascadeSchema:
        return self.inventory.schema

    @property
    def spent(self) -> float:
        return self.inventory.total_cost_spent

    def _best(self):
        best = self.inventory.best_observed()
        if best is None:
            return math.nan, math.nan, None
        y, sid = best
        x = self.inventory[sid].joint_params()
        return y, self.env.true_objective(x), x

    def execute(self, sid: int, stage: int, params, phase: str, kind: str = "") -> None:
        params = np.asarray(params, dtype=float)
        m = self.env.run_stage(sid, stage, params)
        self.inventory.record_measurement(sid, stage, params, m)
        y, y_true, _ = self._best()
        self.events.append(TraceEvent(len(self.events), stage, sid, self.spent, y, self.model_selected,
                                      y_true, phase, kind))

    def run_full(self, x_joint, phase: str, iteration: int, kind: str = "") -> int:
        parts = self.schema.split_joint(x_joint)
        origin = Origin.INIT_DESIGN if phase == "init" else Origin.ACQUISITION
        sid = self.inventory.create_sample(parts[0], origin, iteration)
        for i, p in enumerate(parts):
            self.execute(sid, i + 1, p, phase, kind)
        return sid

    def can_afford_full(self) -> bool:
        full = self.schema.full_cost
        return self.spent < self.config.budget - _EPS and \
            self.spent + full <= self.config.budget + max(self.schema.costs) + _EPS

    def unused_pool(self) -> np.ndarray:
        used = {rec.params[0].tobytes() if rec.params else rec.pending_params.tobytes() for rec in self.inventory}
        keep = [k for k, row in enumerate(self.pool) if row.tobytes() not in used]
        return self.pool[keep]

    def random_point(self, rng: np.random.Generator) -> np.ndarray:
        if self.pool is not None:
            rest = self.unused_pool()
            if len(rest) == 0:
                raise NoFeasibleProposal("candidate pool exhausted")
            return rest[int(rng.integers(len(rest)))]
        return rng.random(self.schema.total_x_dim)

    def update_model_selection(self, surrogate_means) -> None:
        """Pick the completed sample whose parameters the model rates best."""
        done = self.inventory.completed()
        if not done or surrogate_means is None:
            return
        x = np.array([rec.joint_params() for rec in done])
        means = surrogate_means(x)
        k = int(np.argmax(means))
        self.model_selected_params = x[k]
        self.model_selected = self.env.true_objective(x[k])

    def trace(self) -> CampaignTrace:
        _, _, x_best = self._best()
        ref = self.env.regret_reference() if hasattr(self.env, "regret_reference") else None
        return CampaignTrace(self.config.seed, self.config.driver, self.events, self.inventory, ref,
                             self.model_selected_params, x_best)


def run_init_design(env, config: CampaignConfig, campaign: _Campaign | None = None) -> Inventory:
    """Full-cascade quasi-random design of size 2(D+1) (or ``config.init_size``)."""
    camp = campaign or _Campaign(env, config)
    n = config.design_size(camp.schema)
    cost = n * camp.schema.full_cost
    if config.budget < cost - _EPS:
        raise BudgetError(f"budget {config.budget} is below the initial design cost {cost}")
    if camp.pool is not None:
        rng = np.random.default_rng([config.seed, 0])
        if n > len(camp.pool):
            raise BudgetError("initial design larger than the candidate pool")
        points = camp.pool[np.sort(rng.choice(len(camp.pool), size=n, replace=False))]
    else:
        points = sobol(n, camp.schema.total_x_dim, seed=[config.seed, 0])
    for x in points:
        camp.run_full(x, "init", 0)
    return camp.inventory


def _rng_factory(seed: int, iteration: int):
    def rng_for(stage: int, sid: int | None) -> np.random.Generator:
        return np.random.default_rng([seed, iteration, stage, 0 if sid is None else sid + 1])
    return rng_for


def _ready(inventory: Inventory, min_records: int) -> bool:
    counts = inventory.stage_execution_counts()
    return bool(np.all(counts >= min_records))


def _surrogate_means(surrogate: CascadeSurrogate):
    return lambda x: predicted_means(surrogate, x)


# -- drivers -------------------------------------------------------------------------

def run_msbo(env, config: CampaignConfig, gp_fit=gp.fit, on_iteration=None) -> CampaignTrace:
    """Multi-stage BO: each iteration runs exactly one stage, new or continued."""
    config = replace(config, driver="msbo")
    camp = _Campaign(env, config)
    run_init_design(env, config, camp)
    acq = config.acquisition()
    fallback_rng = np.random.default_rng([config.seed, 1])
    it = 0
    surrogate = None
    while camp.spent < config.budget - _EPS:
        it += 1
        if not _ready(camp.inventory, config.min_stage_records):
            if not camp.can_afford_full():
                break
            camp.run_full(camp.random_point(fallback_rng), "acq", it, "full_cascade")
            continue
        surrogate = fit_from_inventory(camp.inventory, config.mc_samples, gp_fit=gp_fit)
        if config.track_model_selection:
            camp.update_model_selection(_surrogate_means(surrogate))
        pool = camp.unused_pool() if camp.pool is not None else None
        try:
            prop = select_next(surrogate, camp.inventory, acq, _rng_factory(config.seed, it), pool=pool)
        except NoFeasibleProposal:
            break
        if on_iteration is not None:
            on_iteration(it, surrogate, camp.inventory, prop)
        if prop.stage == 1:
            sid = camp.inventory.create_sample(prop.params, Origin.ACQUISITION, it)
        else:
            sid = prop.sample_id
        camp.execute(sid, prop.stage, prop.params, "acq", prop.acq_kind.value)
    _final_model_selection(camp, config, gp_fit)
    return camp.trace()


def _final_model_selection(camp: _Campaign, config: CampaignConfig, gp_fit) -> None:
    if not config.track_model_selection or not camp.events or not camp.inventory.completed():
        return
    surrogate = fit_from_inventory(camp.inventory, config.mc_samples, gp_fit=gp_fit)
    if surrogate.all_available(1):
        camp.update_model_selection(_surrogate_means(surrogate))
        camp.events[-1].model_selected_y = camp.model_selected


def run_bofn(env, config: CampaignConfig, gp_fit=gp.fit) -> CampaignTrace:
    """Cascade surrogate and nested EI over the joint input, but always full cascades."""
    config = replace(config, driver="bofn")
    camp = _Campaign(env, config)
    run_init_design(env, config, camp)
    acq = replace(config.acquisition(), min_stage_frequency=None)
    fallback_rng = np.random.default_rng([config.seed, 1])
    it = 0
    while camp.can_afford_full():
        it += 1
        if not _ready(camp.inventory, config.min_stage_records):
            camp.run_full(camp.random_point(fallback_rng), "acq", it, "full_cascade")
            continue
        surrogate = fit_from_inventory(camp.inventory, config.mc_samples, gp_fit=gp_fit)
        if config.track_model_selection:
            camp.update_model_selection(_surrogate_means(surrogate))
        pool = camp.unused_pool() if camp.pool is not None else None
        if pool is not None and len(pool) == 0:
            break
        incumbent = camp.inventory.best_observed()[0]
        rng_for = _rng_factory(config.seed, it)
        props = candidate_proposals(surrogate, camp.inventory, acq, incumbent, rng_for, AcqKind.NESTED_EI,
                                    pool, stages=[1])
        if props[0].raw_value / surrogate.output_std < acq.ei_vanish_threshold:
            props = candidate_proposals(surrogate, camp.inventory, acq, incumbent, rng_for,
                                        AcqKind.UCB_FALLBACK, pool, stages=[1])
        camp.run_full(props[0].tail, "acq", it, props[0].acq_kind.value)
    _final_model_selection(camp, config, gp_fit)
    return camp.trace()


def joint_surrogate(inventory: Inventory, gp_fit=gp.fit, mc_samples: int = 64) -> CascadeSurrogate:
    """Black-box view: one GP from the joint parameter vector to the final measurement."""
    schema = inventory.schema
    done = inventory.completed()
    x = np.array([rec.joint_params() for rec in done]).reshape(len(done), schema.total_x_dim)
    y = np.array([rec.measurements[-1][0] for rec in done])
    flat = CascadeSchema((schema.total_x_dim,), (1,), ((0,),), (schema.full_cost,))
    stage = StageSurrogate(1, [gp_fit(x, y)], schema.total_x_dim, 0, 0, np.zeros(0), np.zeros(0))
    return CascadeSurrogate(flat, [stage], mc_samples)


def run_standard_bo(env, config: CampaignConfig, gp_fit=gp.fit) -> CampaignTrace:
    """Single GP on (x_1..x_N) -> y with analytic EI; intermediate measurements are ignored."""
    config = replace(config, driver="bo")
    camp = _Campaign(env, config)
    run_init_design(env, config, camp)
    acq = replace(config.acquisition(), min_stage_frequency=None, cost_weighting=False)
    it = 0
    while camp.can_afford_full():
        it += 1
        surrogate = joint_surrogate(camp.inventory, gp_fit, config.mc_samples)
        if config.track_model_selection:
            camp.update_model_selection(_surrogate_means(surrogate))
        incumbent = camp.inventory.best_observed()[0]
        rng_for = _rng_factory(config.seed, it)
        if camp.pool is not None:
            pool = camp.unused_pool()
            if len(pool) == 0:
                break
            kind = AcqKind.NESTED_EI
            values = discrete_values(surrogate, 1, None, incumbent, pool, rng_for(1, None), config=acq)
            if values.max() / surrogate.output_std < acq.ei_vanish_threshold:
                kind = AcqKind.UCB_FALLBACK
                values = discrete_values(surrogate, 1, None, incumbent, pool, rng_for(1, None), config=acq,
                                         kind=kind)
            x = pool[int(np.argmax(values))]
        else:
            kind = AcqKind.NESTED_EI
            x, value = optimize_stage_continuous(surrogate, 1, None, incumbent, acq.restarts, rng_for(1, None),
                                                 config=acq)
            if value / surrogate.output_std < acq.ei_vanish_threshold:
                kind = AcqKind.UCB_FALLBACK
                x, _ = optimize_stage_continuous(surrogate, 1, None, incumbent, acq.restarts, rng_for(1, None),
                                                 config=acq, kind=kind)
        camp.run_full(x, "acq", it, kind.value)
    if config.track_model_selection and camp.events:
        camp.update_model_selection(_surrogate_means(joint_surrogate(camp.inventory, gp_fit)))
        camp.events[-1].model_selected_y = camp.model_selected
    return camp.trace()


def run_random(env, config: CampaignConfig) -> CampaignTrace:
    """Full cascades at i.i.d. uniform joint points (uniform pool draws for discrete tasks)."""
    config = replace(config, driver="random", track_model_selection=False)
    camp = _Campaign(env, config)
    if config.budget < config.design_size(camp.schema) * camp.schema.full_cost - _EPS:
        raise BudgetError(f"budget {config.budget} is below the initial design cost")
    rng = np.random.default_rng([config.seed, 2])
    it = 0
    while camp.can_afford_full():
        try:
            x = camp.random_point(rng)
        except NoFeasibleProposal:
            break
        camp.run_full(x, "random", it, "random")
        it += 1
    return camp.trace()


def run_campaign(env, config: CampaignConfig, **kwargs) -> CampaignTrace:
    runner = {"msbo": run_msbo, "bo": run_standard_bo, "bofn": run_bofn, "random": run_random}[config.driver]
    return runner(env, config, **kwargs)
