"""Shared fixtures and small data builders for the test suite."""

import numpy as np
import pytest

from calibcox import data_model


def make_validation(rng, n_subjects=30, occasions=4, p_z=3, p_w=1,
                    alpha=None, sigma2=0.04, rho=0.0, radii=None):
    """Synthetic validation cohort with optional exchangeable residuals.

    X = phi' alpha + e where the design is the standard no-interaction row
    [1, z, w] and the residuals are exchangeable within subject with
    correlation rho (shared subject effect plus independent noise).
    """
    n = n_subjects * occasions
    z = rng.normal(0.5, 0.1, size=(n, p_z))
    w = rng.normal(1.0, 1.0, size=(n, p_w))
    if alpha is None:
        alpha = rng.normal(0.0, 0.5, size=1 + p_z + p_w)
    alpha = np.asarray(alpha, dtype=float)
    phi = np.hstack([np.ones((n, 1)), z, w])
    shared = np.repeat(rng.normal(0.0, 1.0, size=n_subjects), occasions)
    noise = rng.normal(0.0, 1.0, size=n)
    resid = np.sqrt(sigma2) * (np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * noise)
    x = phi @ alpha + resid
    ids = np.repeat([f"s{i}" for i in range(n_subjects)], occasions)
    occ = np.tile(np.arange(1, occasions + 1), n_subjects)
    if radii is None:
        radii = 100.0 * np.arange(1, p_z + 1)
    return data_model.ValidationDataset(
        ids=np.asarray(ids, dtype=object), occasion=occ, x=x, z=z, w=w,
        radii=np.asarray(radii, dtype=float),
        confounder_names=tuple(f"w_{j + 1}" for j in range(p_w))), alpha


def make_survival(rng, n=60, d=2, beta=None, censor_frac=0.3):
    """Small survival dataset with exponential times tied to a linear predictor."""
    if beta is None:
        beta = rng.normal(0.0, 0.5, size=d)
    beta = np.asarray(beta, dtype=float)
    u = rng.normal(0.0, 1.0, size=(n, d))
    t0 = rng.exponential(np.exp(-(u @ beta)))
    cens = rng.exponential(np.quantile(t0, 1.0 - censor_frac), size=n)
    time = np.minimum(t0, cens)
    event = (t0 <= cens).astype(int)
    if event.sum() == 0:
        event[np.argmin(time)] = 1
    return u, time, event, beta


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
