import numpy as np
import pytest

from sepcross.coeffs import bundle
from sepcross.model import build_system


@pytest.fixture(scope="session")
def duff_sys():
    return build_system("duffing_dissipative")


@pytest.fixture(scope="session")
def breath_sys():
    return build_system("duffing_breathing_asym")


@pytest.fixture(scope="session")
def slowfast_sys():
    return build_system("duffing_slowfast")


@pytest.fixture(scope="session")
def duff_coeffs(duff_sys):
    return bundle(duff_sys, np.array([0.0]))


@pytest.fixture(scope="session")
def breath_coeffs(breath_sys):
    return bundle(breath_sys, np.array([0.0]))


@pytest.fixture(scope="session")
def slowfast_coeffs(slowfast_sys):
    return bundle(slowfast_sys, np.array([-0.2, 0.0]))
