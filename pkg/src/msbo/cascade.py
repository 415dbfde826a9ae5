"""Cascade of per-stage GPs with Monte-Carlo propagation of model uncertainty.

Stage ``i`` is modelled by one independent GP per observed output. Its input
is ``[x_i, m_{i-1}]`` in standard mode and ``[x_i, x_{i-1}, m_{i-1}]`` in
residual mode, where ``m_{i-1}`` is the measured (not latent) output of the
previous stage, min-max scaled with bounds taken from the inventory.

Propagation pushes S particles through the chain: each particle draws one
posterior sample per stage and feeds it to the next stage. Particle ``s`` only
ever reads row ``s`` of the standard-normal noise matrix, so permuting the rows
permutes the terminal samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gp
from .inventory import CascadeSchema, Inventory, SurrogateMode

DEFAULT_MC_SAMPLES = 64
REPORT_MC_SAMPLES = 10_000


class SurrogateUnavailable(RuntimeError):
    """A stage in the requested range has no training data yet."""


@dataclass
class StageSurrogate:
    stage_index: int
    gps: list[gp.GpModel]
    x_dim: int
    prev_x_dim: int
    m_dim: int
    m_lower: np.ndarray
    m_scale: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.x_dim + self.prev_x_dim + self.m_dim

    @property
    def n_outputs(self) -> int:
        return len(self.gps)

    @property
    def input_layout(self) -> list[tuple[str, int]]:
        layout = [("x", self.x_dim)]
        if self.prev_x_dim:
            layout.append(("x_prev", self.prev_x_dim))
        if self.m_dim:
            layout.append(("m_prev", self.m_dim))
        return layout

    def build_input(self, x, x_prev=None, m_prev=None) -> np.ndarray:
        """Assemble augmented inputs; all arguments share leading batch shape."""
        x = np.asarray(x, dtype=float)
        parts = [x]
        if self.prev_x_dim:
            parts.append(np.asarray(x_prev, dtype=float))
        if self.m_dim:
            parts.append((np.asarray(m_prev, dtype=float) - self.m_lower) / self.m_scale)
        return np.concatenate(parts, axis=-1)

    def moments(self, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance per output, each of shape (B, n_outputs)."""
        means, variances = [], []
        for model in self.gps:
            m, v = model.posterior(inputs)
            means.append(m)
            variances.append(v)
        return np.stack(means, axis=-1), np.stack(variances, axis=-1)


@dataclass
class CascadeSurrogate:
    schema: CascadeSchema
    stages: list[StageSurrogate | None]
    mc_samples: int = DEFAULT_MC_SAMPLES

    @property
    def n_stages(self) -> int:
        return self.schema.n_stages

    def available(self, stage: int) -> bool:
        return self.stages[stage - 1] is not None

    def all_available(self, start_stage: int = 1) -> bool:
        return all(self.available(i) for i in range(start_stage, self.n_stages + 1))

    def noise_width(self, start_stage: int) -> int:
        return sum(self.schema.obs_dims[start_stage - 1:])

    def tail_dim(self, start_stage: int) -> int:
        return sum(self.schema.x_dims[start_stage - 1:])

    @property
    def output_std(self) -> float:
        """Standardisation scale of the terminal GP (for scale-free thresholds)."""
        return self.stages[-1].gps[0].y_std


def _stage_inputs(inventory: Inventory, stage: int, records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.array([rec.params[stage - 1] for rec in records]).reshape(len(records), -1)
    if stage == 1:
        return x, np.zeros((len(records), 0)), np.zeros((len(records), 0))
    x_prev = np.array([rec.params[stage - 2] for rec in records]).reshape(len(records), -1)
    m_prev = np.array([rec.measurements[stage - 2] for rec in records]).reshape(len(records), -1)
    return x, x_prev, m_prev


def fit_from_inventory(
    inventory: Inventory,
    mc_samples: int = DEFAULT_MC_SAMPLES,
    surrogate_mode: SurrogateMode | str | None = None,
    min_records: int = 1,
    gp_fit=gp.fit,
) -> CascadeSurrogate:
    """Fit every stage GP on the measured data held in ``inventory``.

    Stages with fewer than ``min_records`` completions are left as ``None``
    (unavailable). Records are visited in sample-id order so the fit does not
    depend on insertion order.
    """
    schema = inventory.schema
    mode = SurrogateMode(surrogate_mode) if surrogate_mode is not None else schema.surrogate_mode
    records = list(inventory)
    stages: list[StageSurrogate | None] = []
    for i in range(1, schema.n_stages + 1):
        done = [r for r in records if r.stages_completed >= i]
        if len(done) < max(min_records, 1):
            stages.append(None)
            continue
        x, x_prev, m_prev = _stage_inputs(inventory, i, done)
        if i == 1:
            m_dim = prev_x_dim = 0
            lower = scale = np.zeros(0)
        else:
            m_dim = schema.obs_dims[i - 2]
            prev_x_dim = schema.x_dims[i - 2] if mode is SurrogateMode.RESIDUAL else 0
            seen = np.array([r.measurements[i - 2] for r in records if r.stages_completed >= i - 1])
            lower = seen.min(axis=0)
            span = seen.max(axis=0) - lower
            scale = np.where(span > 1e-12, span, 1.0)
        stage = StageSurrogate(i, [], schema.x_dims[i - 1], prev_x_dim, m_dim, lower, scale)
        inputs = stage.build_input(x, x_prev if prev_x_dim else None, m_prev if m_dim else None)
        targets = np.array([r.measurements[i - 1] for r in done])
        stage.gps = [gp_fit(inputs, targets[:, j]) for j in range(targets.shape[1])]
        stages.append(stage)
    return CascadeSurrogate(schema, stages, mc_samples)


def particle_noise(surrogate: CascadeSurrogate, start_stage: int, n_samples: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Standard-normal draws, one row per particle, one column per stage output."""
    return rng.standard_normal((n_samples, surrogate.noise_width(start_stage)))


def _as_tail_batch(surrogate: CascadeSurrogate, x_tail, start_stage: int) -> np.ndarray:
    if isinstance(x_tail, (list, tuple)):
        x_tail = np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in x_tail]) \
            if len(x_tail) else np.zeros(0)
    x_tail = np.asarray(x_tail, dtype=float)
    if x_tail.ndim == 1:
        x_tail = x_tail[None, :]
    if x_tail.shape[1] != surrogate.tail_dim(start_stage):
        raise ValueError(
            f"expected {surrogate.tail_dim(start_stage)} tail parameters, got {x_tail.shape[1]}")
    return x_tail


def terminal_moments(
    surrogate: CascadeSurrogate,
    x_tail,
    start_stage: int = 1,
    start_measurement=None,
    prev_params=None,
    noise: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Terminal-stage posterior mean/variance per (batch row, particle).

    ``x_tail`` is a (B, D_tail) batch of joint parameters for stages
    ``start_stage..N``. Every stage before N is sampled with the matching
    columns of ``noise`` (shape (S, K)); when ``noise`` is ``None`` posterior
    means are fed forward instead and S is 1. Returns arrays of shape (B, S).
    """
    schema = surrogate.schema
    n = schema.n_stages
    if not (1 <= start_stage <= n):
        raise ValueError("start_stage out of range")
    for i in range(start_stage, n + 1):
        if not surrogate.available(i):
            raise SurrogateUnavailable(f"stage {i} surrogate has no data")
    if (start_stage > 1) != (start_measurement is not None):
        raise ValueError("start_measurement is required exactly when start_stage > 1")

    x_tail = _as_tail_batch(surrogate, x_tail, start_stage)
    batch = x_tail.shape[0]
    n_particles = 1 if noise is None else noise.shape[0]
    offsets = np.cumsum((0,) + schema.x_dims[start_stage - 1:])

    def params(stage):
        k = stage - start_stage
        return x_tail[:, offsets[k]:offsets[k + 1]]

    stage = surrogate.stages[start_stage - 1]
    x_prev = None
    if stage.prev_x_dim:
        if prev_params is None:
            raise ValueError("residual surrogate needs the previous stage parameters")
        x_prev = np.broadcast_to(np.asarray(prev_params, dtype=float), (batch, stage.prev_x_dim))
    m_prev = None
    if stage.m_dim:
        m_prev = np.broadcast_to(np.asarray(start_measurement, dtype=float), (batch, stage.m_dim))
    mean, var = stage.moments(stage.build_input(params(start_stage), x_prev, m_prev))
    if start_stage == n:
        shape = (batch, n_particles)
        return np.broadcast_to(mean[:, :1], shape).copy(), np.broadcast_to(var[:, :1], shape).copy()

    col = 0
    # particles: (B, S, n_out) after the first sampled stage
    mean = mean[:, None, :]
    sd = np.sqrt(var)[:, None, :]
    for i in range(start_stage, n):
        width = schema.obs_dims[i - 1]
        if noise is None:
            m_sample = np.broadcast_to(mean, (batch, 1, width)) if mean.shape[1] == 1 else mean
        else:
            m_sample = mean + sd * noise[None, :, col:col + width]
        col += width
        nxt = surrogate.stages[i]
        s_eff = m_sample.shape[1]
        x_i = np.repeat(params(i + 1)[:, None, :], s_eff, axis=1)
        xp = np.repeat(params(i)[:, None, :], s_eff, axis=1) if nxt.prev_x_dim else None
        inputs = nxt.build_input(x_i, xp, m_sample).reshape(batch * s_eff, nxt.input_dim)
        mu, v = nxt.moments(inputs)
        mean = mu.reshape(batch, s_eff, -1)
        sd = np.sqrt(v).reshape(batch, s_eff, -1)
    return mean[:, :, 0], sd[:, :, 0] ** 2


def terminal_samples(surrogate: CascadeSurrogate, x_tail, start_stage: int = 1, start_measurement=None,
                     prev_params=None, noise: np.ndarray | None = None) -> np.ndarray:
    """Terminal particle values, shape (B, S); the last noise column drives the final draw."""
    mean, var = terminal_moments(surrogate, x_tail, start_stage, start_measurement, prev_params, noise)
    return mean + np.sqrt(var) * noise[None, :, -1]


def propagate(
    surrogate: CascadeSurrogate,
    x_all,
    start_stage: int,
    start_measurement,
    rng: np.random.Generator,
    prev_params=None,
    n_samples: int | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Monte-Carlo terminal samples for one parameter setting of stages ``start_stage..N``.

    Returns exactly S values, S being ``n_samples`` (default: the surrogate's
    ``mc_samples``) or the number of rows of ``noise`` if given.
    """
    if noise is None:
        s = surrogate.mc_samples if n_samples is None else n_samples
        noise = particle_noise(surrogate, start_stage, s, rng)
    return terminal_samples(surrogate, x_all, start_stage, start_measurement, prev_params, noise)[0]


def propagate_mean_only(surrogate: CascadeSurrogate, x_all, start_stage: int = 1, start_measurement=None,
                        prev_params=None) -> float:
    """Deterministic forward pass feeding posterior means from stage to stage."""
    mean, _ = terminal_moments(surrogate, x_all, start_stage, start_measurement, prev_params)
    return float(mean[0, 0])


def predicted_means(surrogate: CascadeSurrogate, x_joint: np.ndarray) -> np.ndarray:
    """Mean-only predictions for a batch of full joint parameter vectors."""
    mean, _ = terminal_moments(surrogate, np.atleast_2d(x_joint), 1, None)
    return mean[:, 0]
