"""Random differentiable multi-stage test processes built from trained MLPs.

Each stage function is an MLP fitted to a random seed dataset: Sobol inputs in
[0, 1]^d with standard-normal targets, plus boundary points just outside the
cube pinned to a low value so maxima tend to be interior. The seed-set size
controls how rugged the function is. Stages are chained as
``h_i = f_i([x_i, h_{i-1}]) + process noise`` and observed through a binary
mask plus measurement noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .._qmc import sobol
from ..inventory import CascadeSchema, SurrogateMode
from .mlp import HIDDEN_DIMS, MlpFunction, train_mlp

BOUNDARY_VALUE = -1.5
BOUNDARY_OFFSET = 0.05
BOUNDARY_POINTS_PER_FACE = 4
EPOCHS = 800
LEARNING_RATE = 0.01
BATCH_SIZE = 16
PROBE_CHUNK = 1024


def boundary_points(d: int, seed) -> np.ndarray:
    """Points just outside each face of [0, 1]^d, 4 per face, Sobol-placed on the face."""
    rng = np.random.default_rng(seed)
    pts = []
    for j in range(d):
        for side in (-BOUNDARY_OFFSET, 1.0 + BOUNDARY_OFFSET):
            face = sobol(BOUNDARY_POINTS_PER_FACE, d - 1, seed=int(rng.integers(2**62)))
            pts.append(np.insert(face, j, side, axis=1))
    return np.vstack(pts)


def generate_stage(in_dim: int, out_dim: int, seed_size: int, seed: int, scaling: str = "none",
                   hidden=HIDDEN_DIMS, epochs: int = EPOCHS) -> MlpFunction:
    """Train one random stage function; identical arguments give identical weights."""
    if seed_size < 1:
        raise ValueError("seed_size must be >= 1")
    if scaling not in ("none", "sigmoid"):
        raise ValueError(f"unknown output scaling {scaling!r}")
    rng = np.random.default_rng(seed)
    x_seed = sobol(seed_size, in_dim, seed=int(rng.integers(2**62)))
    y_seed = rng.standard_normal((seed_size, out_dim))
    x_bound = boundary_points(in_dim, int(rng.integers(2**62)))
    y_bound = np.full((x_bound.shape[0], out_dim), BOUNDARY_VALUE)
    x = np.vstack([x_seed, x_bound])
    y = np.vstack([y_seed, y_bound])
    f = train_mlp(x, y, rng, hidden=hidden, epochs=epochs, lr=LEARNING_RATE, batch_size=BATCH_SIZE)
    f.output_scaling = scaling
    f.seed = seed
    f.seed_size = seed_size
    return f


@dataclass
class CascadeConfig:
    """Everything needed to (re)generate a synthetic cascade."""

    name: str
    x_dims: tuple[int, ...]
    h_dims: tuple[int, ...]
    seed_sizes: tuple[int, ...]
    observed: tuple[tuple[int, ...], ...] | None = None
    process_noise_std: tuple[float, ...] | None = None
    measurement_noise_std: tuple[float, ...] | None = None
    surrogate_mode: str = "standard"
    min_stage_frequency: tuple[float, ...] | None = None

    def __post_init__(self):
        n = len(self.x_dims)
        if self.observed is None:
            self.observed = tuple(tuple(range(h)) for h in self.h_dims)
        if self.process_noise_std is None:
            self.process_noise_std = (0.0,) * n
        if self.measurement_noise_std is None:
            self.measurement_noise_std = (0.0,) * n
        if not (len(self.h_dims) == len(self.seed_sizes) == len(self.observed) == n):
            raise ValueError("per-stage config fields must have equal length")
        if self.h_dims[-1] != 1:
            raise ValueError("final stage must be scalar")

    @property
    def n_stages(self) -> int:
        return len(self.x_dims)

    @property
    def total_x_dim(self) -> int:
        return sum(self.x_dims)


@dataclass
class SyntheticCascade:
    config: CascadeConfig
    stages: list[MlpFunction]
    master_seed: int
    x_opt: np.ndarray | None = None
    y_opt: float | None = None
    _offsets: list[int] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._offsets = list(np.cumsum((0,) + tuple(self.config.x_dims)))

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def x_dims(self) -> tuple[int, ...]:
        return tuple(self.config.x_dims)

    @property
    def total_x_dim(self) -> int:
        return self.config.total_x_dim

    def schema(self, costs=None, surrogate_mode=None) -> CascadeSchema:
        costs = (1.0,) * self.n_stages if costs is None else tuple(costs)
        mode = SurrogateMode(surrogate_mode or self.config.surrogate_mode)
        return CascadeSchema(self.config.x_dims, self.config.h_dims, self.config.observed, costs, mode)

    def split(self, x_joint: np.ndarray) -> list[np.ndarray]:
        x_joint = np.atleast_2d(x_joint)
        return [x_joint[:, a:b] for a, b in zip(self._offsets[:-1], self._offsets[1:])]

    # -- noise-free map ---------------------------------------------------------
    def latent_path(self, x_joint) -> list[np.ndarray]:
        """Noise-free latent outputs of every stage for a batch of joint inputs."""
        xs = self.split(np.asarray(x_joint, dtype=float))
        hs, h = [], None
        for i, f in enumerate(self.stages):
            inp = xs[i] if i == 0 else np.hstack([xs[i], h])
            h = f(inp)
            hs.append(h)
        return hs

    def evaluate(self, x_joint) -> np.ndarray:
        """Noise-free end-to-end objective, shape (B,)."""
        return self.latent_path(x_joint)[-1][:, 0]

    def gradient(self, x_joint) -> np.ndarray:
        """Gradient of the noise-free objective w.r.t. the joint input, shape (B, D)."""
        x_joint = np.atleast_2d(np.asarray(x_joint, dtype=float))
        xs = self.split(x_joint)
        inputs, h = [], None
        for i, f in enumerate(self.stages):
            inp = xs[i] if i == 0 else np.hstack([xs[i], h])
            inputs.append(inp)
            h = f(inp)
        grads = [None] * self.n_stages
        g = np.ones((x_joint.shape[0], 1))
        for i in range(self.n_stages - 1, -1, -1):
            g_in = self.stages[i].vjp(inputs[i], g)
            dx = self.config.x_dims[i]
            grads[i] = g_in[:, :dx]
            g = g_in[:, dx:]
        return np.hstack(grads)

    def latent_jacobians(self, x_joint) -> list[np.ndarray]:
        """d y / d h_i at one joint input, for every stage i (h_N maps to 1)."""
        x_joint = np.atleast_2d(np.asarray(x_joint, dtype=float))[:1]
        xs = self.split(x_joint)
        inputs, h = [], None
        for i, f in enumerate(self.stages):
            inp = xs[i] if i == 0 else np.hstack([xs[i], h])
            inputs.append(inp)
            h = f(inp)
        jac = [None] * self.n_stages
        g = np.ones((1, 1))
        for i in range(self.n_stages - 1, -1, -1):
            jac[i] = g[0].copy()
            g = self.stages[i].vjp(inputs[i], g)[:, self.config.x_dims[i]:]
        return jac

    # -- noisy execution ----------------------------------------------------------
    def run_stage(self, stage: int, params, h_prev, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Execute one stage: returns the (noisy) latent output and its masked noisy measurement."""
        params = np.asarray(params, dtype=float).ravel()
        if stage == 1:
            if h_prev is not None:
                raise ValueError("stage 1 takes no previous latent state")
            inp = params
        else:
            if h_prev is None:
                raise ValueError(f"stage {stage} needs the previous latent state")
            inp = np.concatenate([params, np.asarray(h_prev, dtype=float).ravel()])
        f = self.stages[stage - 1]
        h = f(inp[None, :])[0]
        sp = self.config.process_noise_std[stage - 1]
        if sp > 0:
            h = h + sp * rng.standard_normal(h.shape)
        m = h[list(self.config.observed[stage - 1])]
        sm = self.config.measurement_noise_std[stage - 1]
        if sm > 0:
            m = m + sm * rng.standard_normal(m.shape)
        return h, m

    def run_full(self, x_joint, rng: np.random.Generator) -> float:
        """One noisy pass through every stage; returns the final measurement."""
        xs = [p[0] for p in self.split(np.asarray(x_joint, dtype=float))]
        h = None
        for i in range(self.n_stages):
            h, m = self.run_stage(i + 1, xs[i], h, rng)
        return float(m[0])

    # -- noise level at the output --------------------------------------------------
    def output_noise_std(self, x_joint=None) -> float:
        """Linearised std of the final measurement at ``x_joint`` (default: the optimum)."""
        x = self.x_opt if x_joint is None else x_joint
        if x is None:
            raise ValueError("no point given and the optimum has not been computed")
        var = self.config.measurement_noise_std[-1] ** 2
        for jac, sp in zip(self.latent_jacobians(x), self.config.process_noise_std):
            var += sp**2 * float(jac @ jac)
        return float(np.sqrt(var))

    def mc_output_std(self, x_joint, n: int, rng: np.random.Generator) -> float:
        """Monte-Carlo std of the final measurement at a fixed input (vectorised)."""
        x_joint = np.asarray(x_joint, dtype=float).ravel()
        xs = [p[0] for p in self.split(x_joint)]
        h = None
        for i, f in enumerate(self.stages):
            inp = np.tile(xs[i], (n, 1)) if i == 0 else np.hstack([np.tile(xs[i], (n, 1)), h])
            h = f(inp)
            sp = self.config.process_noise_std[i]
            if sp > 0:
                h = h + sp * rng.standard_normal(h.shape)
        y = h[:, 0] + self.config.measurement_noise_std[-1] * rng.standard_normal(n)
        return float(np.std(y, ddof=1))

    def noise_adjusted_optimum(self) -> float:
        """Regret reference: true optimum plus three output-noise standard deviations."""
        if self.y_opt is None:
            raise ValueError("optimum not computed")
        return self.y_opt + 3.0 * self.output_noise_std()


def evaluate_chunked(cascade: SyntheticCascade, x: np.ndarray, chunk: int = PROBE_CHUNK) -> np.ndarray:
    """Noise-free objective over many points; small chunks stay cache-resident."""
    return np.concatenate([cascade.evaluate(x[k:k + chunk]) for k in range(0, len(x), chunk)])


def stage_seed(master_seed: int, stage: int) -> int:
    return int(np.random.default_rng([master_seed, stage]).integers(2**62))


def generate_cascade(config: CascadeConfig, master_seed: int, with_optimum: bool = True,
                     restarts: int = 64, epochs: int = EPOCHS) -> SyntheticCascade:
    """Build every stage from ``master_seed``; optionally locate the global optimum."""
    stages = []
    n = config.n_stages
    for i in range(n):
        in_dim = config.x_dims[i] + (config.h_dims[i - 1] if i else 0)
        scaling = "sigmoid" if i < n - 1 else "none"
        stages.append(generate_stage(in_dim, config.h_dims[i], config.seed_sizes[i],
                                     stage_seed(master_seed, i + 1), scaling, epochs=epochs))
    cascade = SyntheticCascade(config, stages, master_seed)
    if with_optimum:
        cascade.x_opt, cascade.y_opt = find_ground_truth_optimum(cascade, restarts)
    return cascade


def _ascend(cascade: SyntheticCascade, x0: np.ndarray) -> tuple[np.ndarray, float]:
    def fun(x):
        return -float(cascade.evaluate(x[None, :])[0]), -cascade.gradient(x[None, :])[0]

    res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * len(x0),
                   options={"maxiter": 500, "ftol": 1e-15, "gtol": 1e-10})
    x = np.clip(res.x, 0.0, 1.0)
    return x, float(cascade.evaluate(x[None, :])[0])


def find_ground_truth_optimum(cascade: SyntheticCascade, restarts: int = 64, probe_size: int | None = None,
                              seed: int = 0) -> tuple[np.ndarray, float]:
    """Global maximum of the noise-free map.

    Multi-start gradient ascent from Sobol points, cross-checked by a dense
    quasi-random probe (10^6 points up to 4 input dims, else 10^5) whose best
    points also seed local ascents. The result is the best of everything seen.
    """
    d = cascade.total_x_dim
    if probe_size is None:
        probe_size = 1_000_000 if d <= 4 else 100_000
    best_x, best_y = None, -np.inf
    for x0 in sobol(restarts, d, seed=[seed, 1]):
        x, y = _ascend(cascade, x0)
        if y > best_y:
            best_x, best_y = x, y

    probe = sobol(probe_size, d, seed=[seed, 2])
    values = evaluate_chunked(cascade, probe)
    top = np.argsort(values)[::-1][:8]
    if values[top[0]] > best_y:
        best_x, best_y = probe[top[0]].copy(), float(values[top[0]])
    for k in top:
        x, y = _ascend(cascade, probe[k])
        if y > best_y:
            best_x, best_y = x, y
    return best_x, best_y
