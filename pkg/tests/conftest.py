import numpy as np
import pytest

from dfqvit import tensor as T
from dfqvit.data import make_shapes_dataset
from dfqvit.vit import ViTConfig, ViTModel, train_toy

TOY = ViTConfig()


def numeric_grad(fn, x: np.ndarray, h: float = 1e-5, idx=None) -> np.ndarray:
    """Central differences of scalar ``fn(ndarray)`` at ``x`` (optionally only at flat ``idx``)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size) if idx is None else idx:
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def analytic_grad(build, x: np.ndarray) -> np.ndarray:
    t = T.Tensor(x.copy(), requires_grad=True)
    build(t).backward()
    return t.grad


def scalar_value(build):
    def fn(arr):
        with T.no_grad():
            return build(T.Tensor(arr)).item()
    return fn


def rel_err(a: np.ndarray, n: np.ndarray) -> float:
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-8))


@pytest.fixture(scope="session")
def toy_config():
    return TOY


@pytest.fixture(scope="session")
def trained_model():
    train = make_shapes_dataset(512, seed=1)
    return train_toy(ViTModel.init(TOY, seed=0), train, epochs=200, lr=3e-3, seed=0)


@pytest.fixture
def random_model():
    return ViTModel.init(TOY, seed=3)
