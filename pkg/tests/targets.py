"""Compiled Gaussian test targets ``fn(q, data) -> (log_density, gradient)``."""

import numba as nb
import numpy as np

from varipred.sampler import CompiledTarget


@nb.njit(cache=True)
def _gaussian(q, data):
    mean, precision = data
    d = q - mean
    g = -(precision @ d)
    return 0.5 * (d @ g), g


def gaussian(mean, cov) -> CompiledTarget:
    mean = np.asarray(mean, dtype=float)
    precision = np.linalg.inv(np.atleast_2d(np.asarray(cov, dtype=float)))
    return CompiledTarget(_gaussian, (mean, np.ascontiguousarray(precision)))


def ar1_cov(dim: int, rho: float) -> np.ndarray:
    idx = np.arange(dim)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def python_gaussian(mean, cov):
    """Same density as :func:`gaussian` but a plain Python callable."""
    mean = np.asarray(mean, dtype=float)
    precision = np.linalg.inv(np.atleast_2d(np.asarray(cov, dtype=float)))

    def f(q):
        d = q - mean
        g = -(precision @ d)
        return 0.5 * float(d @ g), g

    return f
