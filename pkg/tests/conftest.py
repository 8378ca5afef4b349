import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fbsde_nearopt import LQParams, make_lq_instance, riccati_lq


@pytest.fixture(scope="session")
def lq_params():
    return LQParams()


@pytest.fixture(scope="session")
def lq_spec(lq_params):
    return make_lq_instance(lq_params)


@pytest.fixture(scope="session")
def lq_riccati(lq_params):
    return riccati_lq(lq_params, ode_steps=10_000)
