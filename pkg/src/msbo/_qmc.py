"""Small helpers around scipy's Sobol engine."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import qmc


def sobol(n: int, d: int, seed=None, scramble: bool = True) -> np.ndarray:
    """Return the first ``n`` points of a (scrambled) Sobol sequence in [0, 1]^d.

    ``seed`` is anything accepted by ``numpy.random.default_rng``. Taking a
    prefix whose length is not a power of two is fine for our purposes, so the
    balance warning from scipy is silenced.
    """
    if n <= 0:
        return np.zeros((0, d))
    if d == 0:
        return np.zeros((n, 0))
    engine = qmc.Sobol(d, scramble=scramble, seed=np.random.default_rng(seed))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=UserWarning)
        return engine.random(n)
