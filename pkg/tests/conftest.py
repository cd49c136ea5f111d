import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from lib.tensor import precision  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run convergence and extrapolation runs')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long training runs, enabled with --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def f64():
    with precision('f64'):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _numeric_grad(loss_fn, tensor, step=1e-5):
    """Central differences of loss_fn() with respect to every entry of tensor"""
    flat = tensor.values.reshape(-1)
    out = np.zeros(flat.shape)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = loss_fn()
        flat[i] = original - step
        lower = loss_fn()
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * step)
    return out.reshape(tensor.shape)


def _stencil_grad(loss_fn, tensor, step=1e-3):
    """Five-point central differences, accurate to O(step**4)"""
    flat = tensor.values.reshape(-1)
    out = np.zeros(flat.shape)
    for i in range(flat.size):
        original = flat[i]
        samples = []
        for offset in (2.0, 1.0, -1.0, -2.0):
            flat[i] = original + offset * step
            samples.append(loss_fn())
        flat[i] = original
        out[i] = (-samples[0] + 8.0 * samples[1] - 8.0 * samples[2] + samples[3]) / (12.0 * step)
    return out.reshape(tensor.shape)


def _rel_error(analytic, numeric):
    return float(np.abs(analytic - numeric).max() / (np.abs(numeric).max() + 1e-8))


def _elementwise_error(analytic, numeric):
    """Largest per-entry |analytic - numeric| / (|numeric| + 1e-8)"""
    return float((np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)).max())


@pytest.fixture
def numeric_grad():
    return _numeric_grad


@pytest.fixture
def rel_error():
    return _rel_error


@pytest.fixture
def stencil_grad():
    return _stencil_grad


@pytest.fixture
def elementwise_error():
    return _elementwise_error
