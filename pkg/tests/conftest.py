import numpy as np
import pandas as pd
import pytest
from scipy.special import ndtr, owens_t

from countyiv.data import Dataset, Schema
from countyiv.simulate import DgpConfig, simulate


def bvn_cdf(h, k, r):
    """P(U <= h, V <= k) with corr(U, V) = r through Owen's T function."""
    h, k = float(h), float(k)
    s = np.sqrt(1 - r * r)
    if h == 0 and k == 0:
        return 0.25 + np.arcsin(r) / (2 * np.pi)
    if h == 0:
        h = 1e-300 * (1 if k >= 0 else -1)
    if k == 0:
        k = 1e-300 * (1 if h >= 0 else -1)
    ah = (k - r * h) / (h * s)
    ak = (h - r * k) / (k * s)
    beta = 0.5 if h * k < 0 else 0.0
    return 0.5 * (ndtr(h) + ndtr(k)) - owens_t(h, ah) - owens_t(k, ak) - beta


def small_dataset(n=400, counties=("A", "B", "C"), seed=0, panel=None):
    rng = np.random.default_rng(seed)
    frame = pd.DataFrame({
        "id": [f"p{i}" for i in range(n)],
        "county": rng.choice(counties, n),
        "d": rng.integers(0, 2, n),
        "x1": rng.normal(size=n),
        "x2": rng.normal(size=n),
    })
    schema = Schema(("x1", "x2"), tuple(counties))
    kw = {} if panel is None else {"panel": panel}
    return Dataset(frame=frame, schema=schema, **kw)


@pytest.fixture(scope="session")
def cross_section():
    return simulate(DgpConfig(n=4000, seed=11, extras=False))


@pytest.fixture(scope="session")
def panel_data():
    return simulate(DgpConfig(n=2500, seed=5, n_periods=8, extras=False))
