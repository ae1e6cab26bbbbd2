import numpy as np
import pytest

from paramdefense.nn import Batch, Model


def central_diff(f, x, h=1e-6):
    """Independent gradient oracle: central differences of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def toy_batch(rng, n_in, n_out, rows=12, head="softmax_ce"):
    X = rng.standard_normal((rows, n_in))
    if head == "softmax_ce":
        y = rng.integers(0, n_out, rows)
    else:
        y = rng.standard_normal((rows, n_out))
    return Batch(X, y)


@pytest.fixture
def small_model():
    return Model.init([2, 8, 2], activation="tanh", seed=3)


@pytest.fixture
def small_batch():
    return toy_batch(np.random.default_rng(5), 2, 2, rows=16)
