"""Acquisition functions and next-experiment selection for cascade BO.

The nested expected improvement integrates the terminal EI over the posterior
of every intermediate measurement. It is estimated by pushing particles
through the surrogate chain (see :mod:`msbo.cascade`) and averaging the
terminal utility. By default the last stage is integrated analytically for
each particle (``terminal="analytic"``); ``terminal="sample"`` instead draws
the terminal value too and averages ``max(0, y - y*)``. Both are unbiased for
the same nested expectation; the analytic variant has lower variance and
reduces exactly to closed-form EI when only the last stage remains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr

from ._qmc import sobol
from .cascade import CascadeSurrogate, particle_noise, terminal_moments
from .inventory import Inventory

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# keeps each posterior call under roughly this many query rows
_CHUNK_ROWS = 65_536


class AcqKind(str, Enum):
    NESTED_EI = "nested_ei"
    UCB_FALLBACK = "ucb_fallback"


class NoFeasibleProposal(RuntimeError):
    """No stage can be proposed; the caller should run a full cascade instead."""


@dataclass(frozen=True)
class AcquisitionConfig:
    mc_samples: int = 64
    restarts: int = 8
    fd_step: float = 1e-3
    max_iter: int = 50
    ucb_beta: float = 4.0
    ei_vanish_threshold: float = 1e-9
    cost_weighting: bool = False
    min_stage_frequency: tuple[float, ...] | None = None
    terminal: str = "analytic"


@dataclass
class AcquisitionProposal:
    stage: int
    sample_id: int | None
    params: np.ndarray
    raw_value: float
    weighted_value: float
    acq_kind: AcqKind
    cost: float = 1.0
    tail: np.ndarray = field(default_factory=lambda: np.zeros(0))


def expected_improvement(mean, std, incumbent):
    """Closed-form EI for a Gaussian with the given mean and standard deviation.

    Works on scalars or arrays; ``std == 0`` gives ``max(0, mean - incumbent)``.
    """
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    improvement = mean - incumbent
    safe = np.where(std > 0, std, 1.0)
    with np.errstate(over="ignore", divide="ignore"):
        z = improvement / safe
        # written without z * Phi(z) so that z = -inf (tiny std) gives 0 rather than nan
        ei = improvement * ndtr(z) + safe * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    out = np.where(std > 0, np.maximum(ei, 0.0), np.maximum(improvement, 0.0))
    return float(out) if out.ndim == 0 else out


def ucb(mean, std, beta: float):
    return np.asarray(mean) + beta * np.asarray(std) if np.ndim(mean) else float(mean + beta * std)


# -- nested values ------------------------------------------------------------

def _per_particle(surrogate, start_stage, start_measurement, x_tail, incumbent, noise, prev_params,
                  terminal: str) -> np.ndarray:
    """Per-particle EI contributions, shape (B, S)."""
    mean, var = terminal_moments(surrogate, x_tail, start_stage, start_measurement, prev_params, noise)
    if terminal == "analytic":
        return expected_improvement(mean, np.sqrt(var), incumbent)
    if terminal == "sample":
        y = mean + np.sqrt(var) * noise[None, :, -1]
        return np.maximum(y - incumbent, 0.0)
    raise ValueError(f"unknown terminal mode {terminal!r}")


def nested_ei_batch(surrogate: CascadeSurrogate, start_stage: int, start_measurement, x_tail,
                    incumbent: float, noise: np.ndarray, prev_params=None,
                    terminal: str = "analytic") -> np.ndarray:
    """Nested EI for a (B, D_tail) batch under shared particle noise."""
    x_tail = np.atleast_2d(np.asarray(x_tail, dtype=float))
    per_row = max(1, _CHUNK_ROWS // max(noise.shape[0], 1))
    out = np.empty(x_tail.shape[0])
    for lo in range(0, x_tail.shape[0], per_row):
        chunk = x_tail[lo:lo + per_row]
        out[lo:lo + per_row] = _per_particle(surrogate, start_stage, start_measurement, chunk, incumbent,
                                             noise, prev_params, terminal).mean(axis=1)
    return out


def nested_ei_with_se(surrogate, stage, start_measurement, x_tail, incumbent, rng, prev_params=None,
                      n_samples=None, terminal="analytic", noise=None) -> tuple[float, float]:
    """Nested EI estimate and its Monte-Carlo standard error."""
    if noise is None:
        s = surrogate.mc_samples if n_samples is None else n_samples
        noise = particle_noise(surrogate, stage, s, rng)
    vals = _per_particle(surrogate, stage, start_measurement, x_tail, incumbent, noise, prev_params,
                         terminal)[0]
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return float(vals.mean()), se


def nested_ei(surrogate: CascadeSurrogate, stage: int, start_measurement, x_tail, incumbent: float,
              rng: np.random.Generator, prev_params=None, n_samples: int | None = None,
              terminal: str = "analytic", noise: np.ndarray | None = None) -> float:
    """Monte-Carlo nested EI of running stages ``stage..N`` with parameters ``x_tail``."""
    return nested_ei_with_se(surrogate, stage, start_measurement, x_tail, incumbent, rng, prev_params,
                             n_samples, terminal, noise)[0]


def nested_ucb_batch(surrogate: CascadeSurrogate, start_stage: int, start_measurement, x_tail,
                     beta: float, noise: np.ndarray, prev_params=None) -> np.ndarray:
    """UCB on the particle mixture: total mean plus ``beta`` total standard deviations."""
    x_tail = np.atleast_2d(np.asarray(x_tail, dtype=float))
    per_row = max(1, _CHUNK_ROWS // max(noise.shape[0], 1))
    out = np.empty(x_tail.shape[0])
    for lo in range(0, x_tail.shape[0], per_row):
        mean, var = terminal_moments(surrogate, x_tail[lo:lo + per_row], start_stage, start_measurement,
                                     prev_params, noise)
        total_mean = mean.mean(axis=1)
        total_var = var.mean(axis=1) + mean.var(axis=1)
        out[lo:lo + per_row] = ucb(total_mean, np.sqrt(total_var), beta)
    return out


# -- optimisers -----------------------------------------------------------------

BatchObjective = Callable[[np.ndarray], np.ndarray]


def maximize_multistart(make_objective: Callable[[int], BatchObjective], dim: int, restarts: int,
                        rng: np.random.Generator, fd_step: float = 1e-3, max_iter: int = 50,
                        scale: float = 1.0) -> tuple[np.ndarray, float]:
    """Multi-start L-BFGS-B over [0, 1]^dim for a batch-evaluated objective.

    ``make_objective(r)`` returns the (deterministic) objective used by restart
    ``r``; gradients are central finite differences computed in one batch.
    Restart points are the first ``restarts`` points of a scrambled Sobol
    sequence, so a run with more restarts extends one with fewer.
    """
    if dim == 0:
        f = make_objective(0)
        return np.zeros(0), float(f(np.zeros((1, 0)))[0])
    starts = sobol(restarts, dim, seed=int(rng.integers(2**62)))
    eye = np.eye(dim) * fd_step
    best_x, best_val = None, -np.inf
    for r, x0 in enumerate(starts):
        f = make_objective(r)

        def value_and_grad(x, f=f):
            pts = np.vstack([x[None, :], x + eye, x - eye])
            vals = f(pts)
            grad = (vals[1:dim + 1] - vals[dim + 1:]) / (2.0 * fd_step)
            return -vals[0] / scale, -grad / scale

        v0 = float(f(x0[None, :])[0])
        if v0 > best_val:
            best_x, best_val = x0.copy(), v0
        res = minimize(value_and_grad, x0, jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * dim,
                       options={"maxiter": max_iter, "gtol": 1e-12})
        x = np.clip(res.x, 0.0, 1.0)
        val = float(f(x[None, :])[0])
        if val > best_val:
            best_x, best_val = x, val
    return best_x, best_val


def _objective_factory(surrogate, stage, start_measurement, incumbent, prev_params, config: AcquisitionConfig,
                       kind: AcqKind, rng: np.random.Generator):
    def make(_r):
        noise = particle_noise(surrogate, stage, config.mc_samples, rng)
        if kind is AcqKind.UCB_FALLBACK:
            return lambda x: nested_ucb_batch(surrogate, stage, start_measurement, x, config.ucb_beta, noise,
                                              prev_params)
        return lambda x: nested_ei_batch(surrogate, stage, start_measurement, x, incumbent, noise, prev_params,
                                         config.terminal)
    return make


def optimize_stage_continuous(surrogate: CascadeSurrogate, stage: int, start_measurement, incumbent: float,
                              restarts: int, rng: np.random.Generator, prev_params=None,
                              config: AcquisitionConfig | None = None, kind: AcqKind = AcqKind.NESTED_EI,
                              return_tail: bool = False):
    """Maximise the nested acquisition over the joint box of stages ``stage..N``.

    Each restart uses its own fixed particle noise (common random numbers), so
    the local search sees a smooth deterministic surface. Returns
    ``(head_params, value)`` where the head is the stage-``stage`` slice of the
    best joint vector, or ``(tail, value)`` with ``return_tail=True``.
    """
    config = config or AcquisitionConfig()
    dim = surrogate.tail_dim(stage)
    make = _objective_factory(surrogate, stage, start_measurement, incumbent, prev_params, config, kind, rng)
    scale = surrogate.output_std
    tail, value = maximize_multistart(make, dim, restarts, rng, config.fd_step, config.max_iter, scale)
    if return_tail:
        return tail, value
    return tail[: surrogate.schema.x_dims[stage - 1]], value


def optimize_stage_discrete(surrogate: CascadeSurrogate, stage: int, start_measurement, incumbent: float,
                            pool: np.ndarray, rng: np.random.Generator, prev_params=None,
                            config: AcquisitionConfig | None = None, kind: AcqKind = AcqKind.NESTED_EI,
                            return_index: bool = False):
    """Exhaustive search over a candidate pool with one shared particle-noise draw.

    Pool rows are joint parameter vectors for stages ``stage..N``. Ties go to
    the lowest index.
    """
    config = config or AcquisitionConfig()
    pool = np.atleast_2d(np.asarray(pool, dtype=float))
    if pool.shape[0] == 0:
        raise ValueError("empty candidate pool")
    values = discrete_values(surrogate, stage, start_measurement, incumbent, pool, rng, prev_params, config, kind)
    idx = int(np.argmax(values))
    head = pool[idx, : surrogate.schema.x_dims[stage - 1]]
    if return_index:
        return head, float(values[idx]), idx
    return head, float(values[idx])


def discrete_values(surrogate, stage, start_measurement, incumbent, pool, rng, prev_params=None,
                    config: AcquisitionConfig | None = None, kind: AcqKind = AcqKind.NESTED_EI) -> np.ndarray:
    config = config or AcquisitionConfig()
    make = _objective_factory(surrogate, stage, start_measurement, incumbent, prev_params, config, kind, rng)
    return make(0)(pool)


# -- stage selection ----------------------------------------------------------------

RngFactory = Callable[[int, int | None], np.random.Generator]


def candidate_proposals(surrogate: CascadeSurrogate, inventory: Inventory, config: AcquisitionConfig,
                        incumbent: float, rng_for: RngFactory, kind: AcqKind = AcqKind.NESTED_EI,
                        pool: np.ndarray | None = None, stages: Sequence[int] | None = None
                        ) -> list[AcquisitionProposal]:
    """Optimised acquisition value of every way to spend the next experiment.

    Order: the new-sample option first, then continuations by stage and
    sample id. ``pool`` (if given) is the discrete set of stage-1 joint vectors.
    """
    schema = inventory.schema
    wanted = set(range(1, schema.n_stages + 1) if stages is None else stages)
    proposals = []

    def cost(i):
        return schema.cost(i) if config.cost_weighting else 1.0

    if 1 in wanted and surrogate.all_available(1):
        rng = rng_for(1, None)
        if pool is not None:
            if len(pool):
                tail, value = _discrete_tail(surrogate, 1, None, incumbent, pool, rng, None, config, kind)
                proposals.append(_proposal(1, None, tail, value, kind, cost(1), schema))
        else:
            tail, value = optimize_stage_continuous(surrogate, 1, None, incumbent, config.restarts, rng,
                                                    config=config, kind=kind, return_tail=True)
            proposals.append(_proposal(1, None, tail, value, kind, cost(1), schema))
    for i in range(2, schema.n_stages + 1):
        if i not in wanted or not surrogate.all_available(i):
            continue
        for sid, m_prev in inventory.continuation_candidates(i):
            prev = inventory[sid].params[i - 2] if surrogate.stages[i - 1].prev_x_dim else None
            rng = rng_for(i, sid)
            tail, value = optimize_stage_continuous(surrogate, i, m_prev, incumbent, config.restarts, rng,
                                                    prev_params=prev, config=config, kind=kind,
                                                    return_tail=True)
            proposals.append(_proposal(i, sid, tail, value, kind, cost(i), schema))
    return proposals


def _discrete_tail(surrogate, stage, m, incumbent, pool, rng, prev, config, kind):
    values = discrete_values(surrogate, stage, m, incumbent, pool, rng, prev, config, kind)
    idx = int(np.argmax(values))
    return pool[idx].copy(), float(values[idx])


def _proposal(stage, sid, tail, value, kind, cost, schema) -> AcquisitionProposal:
    head = np.asarray(tail[: schema.x_dims[stage - 1]], dtype=float)
    return AcquisitionProposal(stage, sid, head, float(value), float(value) / cost, kind, cost,
                               np.asarray(tail, dtype=float))


def choose(proposals: Sequence[AcquisitionProposal], inventory: Inventory,
           config: AcquisitionConfig) -> AcquisitionProposal:
    """Argmax of the weighted values, restricted to an under-sampled stage if one exists."""
    if not proposals:
        raise NoFeasibleProposal("no candidate proposals")
    allowed = list(range(len(proposals)))
    if config.min_stage_frequency is not None:
        freq = inventory.stage_sampling_frequencies()
        deficits = [(config.min_stage_frequency[i] - freq[i], i + 1) for i in range(len(freq))
                    if freq[i] < config.min_stage_frequency[i]]
        for _, stage in sorted(deficits, key=lambda t: (-t[0], t[1])):
            restricted = [k for k in allowed if proposals[k].stage == stage]
            if restricted:
                allowed = restricted
                break
    best = allowed[0]
    for k in allowed[1:]:
        if proposals[k].weighted_value > proposals[best].weighted_value:
            best = k
    return proposals[best]


def select_next(surrogate: CascadeSurrogate, inventory: Inventory, config: AcquisitionConfig,
                rng_for: RngFactory, pool: np.ndarray | None = None,
                incumbent: float | None = None) -> AcquisitionProposal:
    """Pick the next (stage, sample, parameters) to execute.

    Falls back to UCB for every candidate when the best nested EI vanishes
    (relative to the terminal output scale).
    """
    if incumbent is None:
        best = inventory.best_observed()
        if best is None:
            raise NoFeasibleProposal("no completed sample to define the incumbent")
        incumbent = best[0]
    proposals = candidate_proposals(surrogate, inventory, config, incumbent, rng_for, AcqKind.NESTED_EI, pool)
    if not proposals:
        raise NoFeasibleProposal("no stage surrogate available for any candidate")
    best_raw = max(p.raw_value for p in proposals)
    if best_raw / surrogate.output_std < config.ei_vanish_threshold:
        proposals = candidate_proposals(surrogate, inventory, config, incumbent, rng_for,
                                        AcqKind.UCB_FALLBACK, pool)
    return choose(proposals, inventory, config)
