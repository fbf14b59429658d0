"""Shared test helpers."""

import numpy as np

from swprecond.swmodel import ModelParams, ShallowWater, StateVector


def random_state(grid, rng, eta=1.0, vel=0.1):
    return StateVector(eta * rng.standard_normal(grid.shapes[0]),
                       vel * rng.standard_normal(grid.shapes[1]),
                       vel * rng.standard_normal(grid.shapes[2]))


def spun_state(grid, params=None, days=5, seed=0):
    """A forced state a few days from rest plus small noise, for linearization tests."""
    params = params or ModelParams()
    m = ShallowWater(params, grid)
    x = m.propagate(StateVector.zeros(grid), int(days * 86400 / params.dt))
    rng = np.random.default_rng(seed)
    return StateVector(*(f + s * rng.standard_normal(f.shape)
                         for f, s in zip(x, (0.05, 0.005, 0.005))))


def dense_from(apply, n):
    """Assemble a dense matrix column by column from a linear map."""
    return np.column_stack([apply(e) for e in np.eye(n)])
