import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from heatrecon.inverse import fit_spectral_data  # noqa: E402
from heatrecon.inverse.pipeline import reconstruct  # noqa: E402
from heatrecon.phd import sample_phd  # noqa: E402
from heatrecon.space import build_circle, build_interval_orbifold, build_warped_torus  # noqa: E402
from heatrecon.spectral import solve_space  # noqa: E402


def bump_profile(y):
    return 2 + np.cos(y)


@pytest.fixture(scope="session")
def circle():
    sp = build_circle(512)
    return sp, solve_space(sp, 400)


@pytest.fixture(scope="session")
def circle_full(circle):
    sp, _ = circle
    return sp, solve_space(sp)


@pytest.fixture(scope="session")
def density_circle():
    sp = build_circle(512, density_profile=bump_profile)
    return sp, solve_space(sp, 400)


@pytest.fixture(scope="session")
def orbifold():
    sp = build_interval_orbifold(256)
    return sp, solve_space(sp)


@pytest.fixture(scope="session")
def warped_torus():
    sp = build_warped_torus(32, 16, 0.25, lambda y: 2 + np.cos(np.pi * y))
    return sp, solve_space(sp)


@pytest.fixture(scope="session")
def circle_phd(circle):
    _, spec = circle
    return sample_phd(spec, spec.source_space.diameter, 0.1, time_delta=0.05)


@pytest.fixture(scope="session")
def density_phd(density_circle):
    _, spec = density_circle
    return sample_phd(spec, spec.source_space.diameter, 0.1, time_delta=0.05)


@pytest.fixture(scope="session")
def circle_lsd(circle_phd):
    return fit_spectral_data(circle_phd)


@pytest.fixture(scope="session")
def density_lsd(density_phd):
    return fit_spectral_data(density_phd)


@pytest.fixture(scope="session")
def circle_recon(circle_phd):
    return reconstruct(circle_phd)


@pytest.fixture(scope="session")
def density_recon(density_phd):
    return reconstruct(density_phd)
