"""Shared fixtures for the test suite."""
import pathlib

import numpy as np
import pytest

from nmpckit import models

SCENARIO_DIR = pathlib.Path(__file__).resolve().parents[1] / "scenarios"


@pytest.fixture(scope="session")
def pendulum():
    return models.make_pendulum_model()


@pytest.fixture(scope="session")
def chain():
    return models.make_chain_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
