from typing import Callable

import numpy as np
import pytest

from patchzero_lab.data import DatasetSplits, gen_shapes_splits
from patchzero_lab.models import AttackConfig, DataConfig, DefenseConfig, TrainConfig
from patchzero_lab.nn import init_params
from patchzero_lab.tensor import Tape, Tensor, backward, precision


def _numeric_grad(fn: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar-valued tensor function, evaluated in float64."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    with precision("float64"):
        for idx in np.ndindex(x.shape):
            saved = x[idx]
            x[idx] = saved + h
            plus = fn(Tensor(x)).item()
            x[idx] = saved - h
            minus = fn(Tensor(x)).item()
            x[idx] = saved
            grad[idx] = (plus - minus) / (2 * h)
    return grad


def _analytic_grad(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    with precision("float64"):
        leaf = Tensor(x, requires_grad=True)
        with Tape():
            backward(fn(leaf))
    return leaf.grad


def _rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / scale


@pytest.fixture
def numeric_grad():
    return _numeric_grad


@pytest.fixture
def analytic_grad():
    return _analytic_grad


@pytest.fixture
def rel_error():
    return _rel_error


@pytest.fixture
def single_thread(monkeypatch):
    # precision() is thread-local, so float64 checks keep attacks on the calling thread.
    monkeypatch.setenv("PZ_THREADS", "1")


@pytest.fixture(scope="session")
def tiny_data_cfg() -> DataConfig:
    return DataConfig(image_size=8, n_train_per_class=4, n_val_per_class=2, n_test_per_class=2)


@pytest.fixture(scope="session")
def tiny_splits(tiny_data_cfg) -> DatasetSplits:
    return gen_shapes_splits(tiny_data_cfg, seed=0)


@pytest.fixture
def tiny_classifier():
    return init_params("classifier", 0, image_size=8)


@pytest.fixture
def tiny_detector():
    return init_params("detector", 1)


@pytest.fixture
def fast_attack() -> AttackConfig:
    return AttackConfig(eps=1.0, alpha=0.1, iters=3, restarts=2, seed=5)


@pytest.fixture
def fast_train_cfg() -> TrainConfig:
    return TrainConfig(
        lr=1e-3,
        batch_size=8,
        classifier_epochs=2,
        stage1_epochs=2,
        stage2_epochs=1,
        attack=AttackConfig(alpha=0.1, iters=2, restarts=1),
        patch_fraction_range=(0.05, 0.1),
        val_subset=4,
    )


@pytest.fixture
def defense_cfg(tiny_splits) -> DefenseConfig:
    return DefenseConfig(dilation_radius=1, mean_pixel=[float(v) for v in tiny_splits.train.mean])
