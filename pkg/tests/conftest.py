import numpy as np
import pytest

from graphstruct import dataio, gcn
from graphstruct.numcore import Rng


@pytest.fixture(scope="session")
def bundle_dir(tmp_path_factory):
    """Session-scoped directory of converted scikit-learn bundles."""
    base = tmp_path_factory.mktemp("bundles")
    for name in ("wine", "cancer", "digits"):
        dataio.make_tabular_bundle(name, str(base / name), seed=0)
    return base


@pytest.fixture(scope="session")
def wine(bundle_dir):
    return dataio.load_dataset(str(bundle_dir / "wine"))


@pytest.fixture(scope="session")
def cancer(bundle_dir):
    return dataio.load_dataset(str(bundle_dir / "cancer"))


@pytest.fixture(scope="session")
def digits(bundle_dir):
    return dataio.load_dataset(str(bundle_dir / "digits"))


def small_instance(seed=0, n=8, n_feat=4, hidden=5, n_classes=3):
    """Random labelled instance used across the gradient tests."""
    rng = Rng(seed)
    x = rng.normal((n, n_feat))
    labels = rng.integers(0, n_classes, size=n)
    split = gcn.LabeledSplit(labels, np.arange(0, n // 2),
                             [n // 2], [n // 2 + 1], np.arange(n // 2 + 2, n))
    params = gcn.GcnParams.init(n_feat, hidden, n_classes, rng.derive(1))
    a = (rng.uniform((n, n)) < 0.4).astype(float)
    a = np.maximum(a, a.T)
    np.fill_diagonal(a, 0.0)
    return x, labels, split, params, a
