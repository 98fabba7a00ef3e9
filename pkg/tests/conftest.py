from pathlib import Path

import numpy as np
import pytest

from mpsq.fluid import FluidContext
from mpsq.model import QueueModel, RoutingMatrix, ServiceSpec, load_model

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "mpsq" / "fixtures"
P2 = np.array([[0.0, 0.3], [0.2, 0.0]])


@pytest.fixture(scope="session")
def k2():
    return load_model(FIXTURES / "k2_exponential.yaml")


@pytest.fixture(scope="session")
def k3():
    return load_model(FIXTURES / "k3_mixed.yaml")


@pytest.fixture(scope="session")
def k2_ctx(k2):
    return FluidContext(k2)


@pytest.fixture(scope="session")
def k3_ctx(k3):
    return FluidContext(k3)


def single_class(rate=1.0, alpha=0.0, z0=0):
    return QueueModel(np.array([alpha]), (ServiceSpec.exponential(rate),),
                      RoutingMatrix(np.zeros((1, 1))), z0=np.array([z0]))
