"""Tiny fully-connected network with a deterministic numpy Adam trainer.

Everything runs in float64 on the CPU from a seeded generator, so the same seed
gives bit-identical weights on a given platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HIDDEN_DIMS = (64, 128, 32)
LEAKY_SLOPE = 0.01


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class MlpFunction:
    """LeakyReLU MLP ``in -> hidden... -> out`` with optional sigmoid on the output."""

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_scaling: str = "none"
    seed: int = 0
    seed_size: int = 0

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def _forward(self, x: np.ndarray):
        acts, pre = [x], []
        a = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            pre.append(z)
            a = z if k == last else np.where(z > 0, z, LEAKY_SLOPE * z)
            acts.append(a)
        return acts, pre

    def raw(self, x) -> np.ndarray:
        """Network output before output scaling."""
        a = np.atleast_2d(np.asarray(x, dtype=float))
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w + b
            if k != last:
                a = np.maximum(a, LEAKY_SLOPE * a)
        return a

    def __call__(self, x) -> np.ndarray:
        out = self.raw(x)
        return sigmoid(out) if self.output_scaling == "sigmoid" else out

    def vjp(self, x, grad_out) -> np.ndarray:
        """Vector-Jacobian product: gradient of ``sum(grad_out * f(x))`` w.r.t. ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        acts, pre = self._forward(x)
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        if self.output_scaling == "sigmoid":
            s = sigmoid(pre[-1])
            g = g * s * (1.0 - s)
        for k in range(len(self.weights) - 1, -1, -1):
            g = g @ self.weights[k].T
            if k > 0:
                g = g * np.where(pre[k - 1] > 0, 1.0, LEAKY_SLOPE)
        return g

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_params(layer_dims, rng: np.random.Generator) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return weights, biases


def train_mlp(
    x: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    hidden=HIDDEN_DIMS,
    epochs: int = 800,
    lr: float = 0.01,
    batch_size: int = 16,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
) -> MlpFunction:
    """Fit an MLP to ``(x, y)`` with minibatch Adam on the mean squared error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    dims = (x.shape[1], *hidden, y.shape[1])
    weights, biases = init_params(dims, rng)

    # flat parameter / gradient buffers with per-layer views, so one Adam update touches one array
    shapes = []
    for w, b in zip(weights, biases):
        shapes += [w.shape, b.shape]
    sizes = [int(np.prod(s)) for s in shapes]
    flat = np.concatenate([p.ravel() for pair in zip(weights, biases) for p in pair])
    grad = np.zeros_like(flat)
    views, gviews, k = [], [], 0
    for shape, size in zip(shapes, sizes):
        views.append(flat[k:k + size].reshape(shape))
        gviews.append(grad[k:k + size].reshape(shape))
        k += size
    ws, bs = views[0::2], views[1::2]
    gws, gbs = gviews[0::2], gviews[1::2]
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    b1, b2 = betas
    step = 0
    bsz = max(1, min(batch_size, n))
    last = len(ws) - 1

    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, bsz):
            idx = order[lo:lo + bsz]
            a = x[idx]
            acts, pres = [a], []
            for j in range(len(ws)):
                z = a @ ws[j] + bs[j]
                pres.append(z)
                a = z if j == last else np.maximum(z, LEAKY_SLOPE * z)
                acts.append(a)
            dz = 2.0 * (a - y[idx]) / a.size
            for j in range(last, -1, -1):
                np.matmul(acts[j].T, dz, out=gws[j])
                np.sum(dz, axis=0, out=gbs[j])
                if j:
                    dz = (dz @ ws[j].T) * np.where(pres[j - 1] > 0, 1.0, LEAKY_SLOPE)
            step += 1
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            m_hat = m / (1 - b1**step)
            v_hat = v / (1 - b2**step)
            flat -= lr * m_hat / (np.sqrt(v_hat) + eps)

    return MlpFunction(dims, [w.copy() for w in ws], [b.copy() for b in bs])
