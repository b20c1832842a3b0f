import os

import numpy as np
import pytest


def pytest_collection_modifyitems(config, items):
    if os.environ.get("LIPLAB_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="desk-scale training run; set LIPLAB_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f at x (x is restored afterwards)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def fd():
    return numeric_grad


@pytest.fixture
def err():
    return rel_err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
