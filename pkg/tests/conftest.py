import numpy as np
import pytest

from sirpdoa.clutter import ClutterModel, TextureFamily, TextureKind, speckle_template
from sirpdoa.model import Scene, half_wavelength_ula


@pytest.fixture(scope="session")
def geom():
    return half_wavelength_ula(3, 4)


@pytest.fixture(scope="session")
def scene():
    return Scene(
        dod=np.deg2rad([18.0, 45.0]),
        doa=np.deg2rad([20.0, 40.0]),
        rcs=(2 + 3j, 1 - 0.5j),
        doppler=(0.3, 0.8),
        pulses=15,
        snapshots_per_pulse=5,
    )


@pytest.fixture(scope="session")
def texture_k():
    return TextureFamily(TextureKind.K_DISTRIBUTED, 2.0, 10.0)


@pytest.fixture(scope="session")
def texture_t():
    return TextureFamily(TextureKind.T_DISTRIBUTED, 1.1, 2.0)


@pytest.fixture(scope="session")
def unit_clutter_k(texture_k):
    return ClutterModel(texture_k, speckle_template(12))
