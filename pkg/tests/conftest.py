import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from afem_gmres import mesh as meshmod
from afem_gmres.fespace import PdeData

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def lshape():
    return meshmod.initial_mesh_lshape()


@pytest.fixture(scope="session")
def benchmark_data():
    """K = I, b = (1, 25), c = 0, f = 1."""
    return PdeData(convection=(1.0, 25.0), source=1.0)


def refine_chain(mesh, n, frac=0.3, seed=0, mode="bisec3"):
    """``n`` random refinements of ``mesh``; returns the list of meshes."""
    rng = np.random.default_rng(seed)
    meshes = [mesh]
    for _ in range(n):
        m = meshes[-1]
        k = max(1, int(frac * m.n_elements))
        meshes.append(meshmod.refine(m, rng.choice(m.n_elements, k, replace=False), mode))
    return meshes


@pytest.fixture(scope="session")
def lshape_chain(lshape):
    return refine_chain(lshape, 3, frac=0.25, seed=1)
