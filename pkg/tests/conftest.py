import numpy as np
import pytest

from dragplan.params import Se3Gains, VehicleParams


@pytest.fixture
def params() -> VehicleParams:
    return VehicleParams()


@pytest.fixture
def zero_drag_params() -> VehicleParams:
    return VehicleParams(parasitic_drag=[0.0, 0.0, 0.0], rotor_drag=[0.0, 0.0, 0.0])


@pytest.fixture
def gains() -> Se3Gains:
    return Se3Gains()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
