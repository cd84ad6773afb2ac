"""Shared test utilities: numeric differentiation and random parameter draws."""

import numpy as np

from contextrl import distributions as cd


def numeric_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at array x."""
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += eps
        xm = x.copy()
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def random_params(family, dim, rng):
    """Valid random parameters, comfortably inside the families' domains."""
    if family in (cd.Family.GAUSSIAN, cd.Family.LOGIT_NORMAL):
        return cd.PosteriorParams(
            family,
            mean=rng.normal(0.0, 1.0, size=dim),
            var=rng.uniform(0.3, 2.0, size=dim),
        )
    if family is cd.Family.CATEGORICAL:
        p = rng.uniform(0.1, 1.0, size=dim)
        return cd.PosteriorParams.categorical(p / p.sum())
    return cd.PosteriorParams.dirichlet(rng.uniform(0.5, 4.0, size=dim))


ALL_FAMILIES = (
    cd.Family.GAUSSIAN,
    cd.Family.CATEGORICAL,
    cd.Family.DIRICHLET,
    cd.Family.LOGIT_NORMAL,
)
