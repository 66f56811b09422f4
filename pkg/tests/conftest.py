import numpy as np
import pytest

from artimesh.fields import SdfField, init_sdf_ellipsoid


@pytest.fixture(scope="session")
def fitted_sdf():
    """Ellipsoid-initialised SDF field shared by the whole session (slow)."""
    rng = np.random.default_rng(42)
    field = SdfField(rng, width=64)
    report = init_sdf_ellipsoid(field, rng)
    return field, report
