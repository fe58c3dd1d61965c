import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rytower.env import Environment, Model
from rytower.models import geo_model, gm3_model, single_atom_model
from rytower.tower import TowerBundle


@pytest.fixture(scope="session")
def gm3_env():
    return Environment(gm3_model(), seed=7)


@pytest.fixture(scope="session")
def geo_env():
    return Environment(geo_model(), seed=11)


@pytest.fixture(scope="session")
def all_a_env():
    """GM3 alphabet forced to symbol A on every fiber."""
    m = gm3_model()
    return Environment(Model(m.symbols, (1.0, 0.0), name="gm3-allA"), seed=1)


@pytest.fixture(scope="session")
def single_env():
    return Environment(single_atom_model(), seed=3)


@pytest.fixture()
def gm3_bundle(gm3_env):
    return TowerBundle(gm3_env)


@pytest.fixture()
def geo_bundle(geo_env):
    return TowerBundle(geo_env)


@pytest.fixture()
def all_a_bundle(all_a_env):
    return TowerBundle(all_a_env)
