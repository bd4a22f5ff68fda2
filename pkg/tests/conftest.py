import numpy as np
import pytest

from semcorr.pipeline import prepare
from semcorr.synth import synthesize_category


@pytest.fixture(scope="session")
def small_tables():
    """Six tables, four sets, 300-point clouds: big enough for every module, fast to build."""
    ds = synthesize_category("tables", 6, 4, seed=3)
    return prepare(ds, n_points=300, k=8, seed=0)


@pytest.fixture(scope="session")
def small_mugs_hyper():
    ds = synthesize_category("mugs", 5, 6, seed=4, symmetry_mode="both")
    return prepare(ds, n_points=300, k=8, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
