"""Shared fixtures: tiny datasets and contexts reused across test modules."""

import numpy as np
import pytest
import torch

from repap.datagen import generate_charge_dataset, generate_darcy_dataset
from repap.simp import generate_topology_fixtures
from repap.tasks import context_from_container, split_container


@pytest.fixture(scope="session")
def darcy_small():
    return generate_darcy_dataset(8, n=16, seed=101)


@pytest.fixture(scope="session")
def charge_small():
    return generate_charge_dataset(8, n=16, seed=102)


@pytest.fixture(scope="session")
def topo_small():
    return generate_topology_fixtures(8, 4, seed=103)


@pytest.fixture(scope="session")
def darcy_ctx(darcy_small):
    return context_from_container(darcy_small)


@pytest.fixture(scope="session")
def darcy_split(darcy_small):
    return split_container(darcy_small)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(7)
