"""Shared test utilities: finite differences and small fixtures."""

import numpy as np


def finite_diff(f, params, h=1e-5):
    """Central finite-difference gradient of a scalar function of a flat vector."""
    g = np.zeros_like(params)
    for i in range(params.size):
        hi = params.copy()
        lo = params.copy()
        hi[i] += h
        lo[i] -= h
        g[i] = (f(hi) - f(lo)) / (2.0 * h)
    return g


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a)
    b = np.asarray(b)
    return np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))


def random_batch(rng, n, obs_dim, space):
    """Synthetic transition batch over a given action space."""
    discrete = hasattr(space, "n")
    return {
        "s": rng.normal(size=(n, obs_dim)),
        "a": rng.integers(space.n, size=n) if discrete else rng.uniform(-1, 1, size=(n, space.dim)),
        "r": rng.uniform(0, 1, size=n),
        "c": rng.uniform(0, 1, size=n),
        "s2": rng.normal(size=(n, obs_dim)),
        "done": rng.random(n) < 0.2,
    }
