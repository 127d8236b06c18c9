import numpy as np
import pytest

from flatflow import geometry as geo
from flatflow import laplace_beltrami as lb


@pytest.fixture(scope="session")
def circle256():
    return geo.build_shape({"kind": "circle", "R": 1.0, "n": 256})


@pytest.fixture(scope="session")
def circle512():
    return geo.build_shape({"kind": "circle", "R": 1.0, "n": 512})


@pytest.fixture(scope="session")
def sphere3():
    return geo.build_shape({"kind": "sphere", "R": 1.0, "subdiv": 3})


@pytest.fixture(scope="session")
def sphere4():
    return geo.build_shape({"kind": "sphere", "R": 1.0, "subdiv": 4})


@pytest.fixture(scope="session")
def sphere4_bundle(sphere4):
    """(surface, curvature, solver) of the subdiv-4 unit sphere."""
    curv = geo.compute_curvature(sphere4)
    return sphere4, curv, lb.assemble(sphere4)


@pytest.fixture(scope="session")
def sphere3_bundle(sphere3):
    curv = geo.compute_curvature(sphere3)
    return sphere3, curv, lb.assemble(sphere3)


@pytest.fixture(scope="session")
def circle512_bundle(circle512):
    curv = geo.compute_curvature(circle512)
    return circle512, curv, lb.assemble(circle512)


def vertex_angles(surface):
    return np.arctan2(surface.vertices[:, 1], surface.vertices[:, 0])


def fit_circle_modes(surface, kmax):
    """Least-squares Fourier amplitudes of the radial deviation."""
    theta = vertex_angles(surface)
    r = np.linalg.norm(surface.vertices, axis=1)
    cols = [np.ones_like(theta)]
    for k in range(1, kmax + 1):
        cols.append(np.cos(k * theta))
        cols.append(np.sin(k * theta))
    coef, *_ = np.linalg.lstsq(np.column_stack(cols), r, rcond=None)
    amps = {0: coef[0]}
    for k in range(1, kmax + 1):
        amps[k] = float(np.hypot(coef[2 * k - 1], coef[2 * k]))
    return amps
