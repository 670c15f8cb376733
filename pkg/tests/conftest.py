import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synth import digit_dataset  # noqa: E402


@pytest.fixture(scope="session")
def small_digits():
    """300 rendered digit images, shared across fast tests."""
    return digit_dataset(300, seed=11)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def finite_difference(fun, x, step=1e-3):
    """Central-difference gradient of a scalar function over array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        hi = x.copy()
        lo = x.copy()
        hi[idx] += step
        lo[idx] -= step
        grad[idx] = (fun(hi) - fun(lo)) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    """Norm-based relative error between two gradient arrays."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return np.linalg.norm(a - n) / denom
