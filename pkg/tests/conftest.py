import numpy as np
import pytest

from unrollct.operators import Geometry, build_projector


@pytest.fixture(scope="session")
def proj16():
    geo = Geometry(16, 23, detector_spacing=2.0 / 16)
    return build_projector(geo, (16, 16), pixel_size=2.0 / 16)


@pytest.fixture(scope="session")
def proj32():
    geo = Geometry(32, 47, detector_spacing=2.0 / 32)
    return build_projector(geo, (32, 32), pixel_size=2.0 / 32)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
