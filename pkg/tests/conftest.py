import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ivddpc import bench
from ivddpc.sslib import ControllerModel, StateSpaceModel


@pytest.fixture(scope="session")
def plant():
    return bench.benchmark_plant()


@pytest.fixture(scope="session")
def controller():
    return bench.benchmark_controller()


@pytest.fixture(scope="session")
def mimo_controller():
    return bench.mimo_controller()


def random_stable_model(rng, n=3, m=1, p=1, rho=0.8, with_gain=False):
    A = rng.standard_normal((n, n))
    A *= rho / max(abs(np.linalg.eigvals(A)))
    B = rng.standard_normal((n, m))
    C = rng.standard_normal((p, n))
    D = rng.standard_normal((p, m)) * 0.3
    model = StateSpaceModel(A=A, B=B, C=C, D=D)
    if with_gain:
        K = bench.kalman_gain(model, 0.05 * np.eye(n), np.eye(p))
        model = model.with_gain(K)
    return model


def random_stable_controller(rng, nc=2, m=1, p=1, rho=0.7):
    A = rng.standard_normal((nc, nc))
    A *= rho / max(abs(np.linalg.eigvals(A)))
    B = rng.standard_normal((nc, p)) * 0.5
    C = rng.standard_normal((m, nc)) * 0.5
    D = rng.standard_normal((m, p)) * 0.1
    return ControllerModel(A=A, B=B, C=C, D=D)
