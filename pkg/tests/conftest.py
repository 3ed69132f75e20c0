import numpy as np
import pytest

from ticde.core import Dataset
from ticde.simulation import SimConfig, simulate


def make_dataset(a, y, x=None, ids=None):
    a = np.asarray(a)
    n = len(a)
    if x is None:
        x = np.empty((n, 0))
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if ids is None:
        ids = tuple(f"u{i}" for i in range(n))
    return Dataset(ids=tuple(ids), a=a, y=np.asarray(y, dtype=float), x=x)


def random_dataset(rng, n=None, d=2, p_treat=0.5):
    """Small random dataset with both arms guaranteed present."""
    if n is None:
        n = int(rng.integers(6, 30))
    while True:
        a = (rng.random(n) < p_treat).astype(int)
        if 0 < a.sum() < n:
            break
    y = rng.normal(size=n)
    x = rng.normal(size=(n, d))
    return make_dataset(a, y, x)


@pytest.fixture(scope="session")
def oracle_sample_5k():
    # Default generator settings at n=5000; reused wherever a known-truth
    # sample is enough.
    return simulate(SimConfig(n=5000, seed=11))


@pytest.fixture(scope="session")
def oracle_sample_5k_null():
    # Zero effect, high confounding, high noise.
    return simulate(SimConfig(beta_a=0.0, beta_c=100.0, gamma=4.0, n=5000, seed=12))
