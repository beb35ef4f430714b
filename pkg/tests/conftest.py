import numpy as np
import pytest

from unlearn_inversion.tensor import ModelState, convnet, mlp
from unlearn_inversion.training import init_model

# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def central_diff(f, x, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        hi = f(x)
        flat[i] = old - h
        lo = f(x)
        flat[i] = old
        out[i] = (hi - lo) / (2 * h)
    return out.reshape(x.shape)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30)


def random_mlp(seed, dims=(6, 8, 3)) -> ModelState:
    """Seeded MLP with nonzero biases, so every parameter gets a gradient."""
    arch = mlp(dims[0], list(dims[1:-1]), dims[-1])
    rng = np.random.default_rng(seed)
    return ModelState(arch, 0.5 * rng.standard_normal(arch.param_count))


def random_convnet(seed, shape=(2, 6, 6), channels=(3,), classes=3) -> ModelState:
    arch = convnet(shape, list(channels), classes)
    rng = np.random.default_rng(seed)
    return ModelState(arch, 0.4 * rng.standard_normal(arch.param_count))


@pytest.fixture
def small_mlp():
    return random_mlp(0)


@pytest.fixture
def init_mlp():
    return init_model(mlp(24, [16], 4), 0)
