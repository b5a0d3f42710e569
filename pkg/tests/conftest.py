import numpy as np
import pytest

from ivforest import CausalDataset, FeatureSpec


@pytest.fixture
def small_dataset():
    """600 rows, 60 clusters, 3 continuous features, mild signal."""
    rng = np.random.default_rng(1234)
    n, p = 600, 3
    X = rng.standard_normal((n, p))
    cluster = np.repeat(np.arange(60), 10)
    z_cl = np.zeros(60)
    z_cl[rng.permutation(60)[:30]] = 1
    Z = z_cl[cluster]
    D = np.where(Z == 1, rng.uniform(size=n) < 0.8, rng.uniform(size=n) < 0.1).astype(float)
    Y = X[:, 0] + 0.5 * D + 0.3 * rng.standard_normal(n)
    specs = tuple(FeatureSpec(name=f"x{j+1}") for j in range(p))
    return CausalDataset(
        features=X, outcome=Y, treatment=D, instrument=Z,
        cluster=cluster, feature_specs=specs,
    )
