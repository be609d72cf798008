import numpy as np
import pytest


def fd_gradient(f, x, h=1.0e-6):
    """Central finite-difference gradient of scalar f at x (any array shape)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b):
    """Max-norm relative deviation of a from reference b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(b)), 1.0e-10)
    return np.max(np.abs(a - b)) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(20240901)
