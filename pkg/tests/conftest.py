import numpy as np
import pytest

from cdrflow import flow
from cdrflow.data import synthetic_dataset


def central_difference(fn, array, step=1e-6):
    """Finite-difference gradient of a scalar function of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = array[idx]
        array[idx] = orig + step
        up = fn()
        array[idx] = orig - step
        down = fn()
        array[idx] = orig
        grad[idx] = (up - down) / (2 * step)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def randomize_parameters(model, rng):
    """Replace every parameter with fan-in-scaled noise (zero-init layers included)."""
    for _, p in model.named_parameters():
        fan_in = p.data[0].size if p.data.ndim > 1 else max(p.data.size, 1)
        bound = 1.0 / np.sqrt(fan_in)
        p.data = rng.uniform(-bound, bound, size=p.shape)


def tiny_config(n_max=8, **overrides):
    values = dict(n_max=n_max, n_distance_layers=2, n_amino_layers=2, cnn_hidden=3, gnn_hidden=4, mlp_hidden=(5,))
    values.update(overrides)
    return flow.FlowConfig(**values)


@pytest.fixture(scope="session")
def small_dataset():
    return synthetic_dataset("H3", 24, lengths=(5, 6, 8), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one (number, passed, detail) entry per acceptance criterion, printed after the run
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
