import numpy as np
import pytest

from xfg import geometry


@pytest.fixture(scope="session")
def layout224():
    return geometry.default_layout()


@pytest.fixture(scope="session")
def layout112():
    return geometry.default_layout((112, 112))


@pytest.fixture(scope="session")
def tri112(layout112):
    return geometry.delaunay(layout112.points)


@pytest.fixture(scope="session")
def raster112(layout112, tri112):
    return geometry.rasterize_triangles(layout112, tri112)


@pytest.fixture(scope="session")
def identity_map112(layout112, tri112):
    src = layout112.as_landmarks()
    return geometry.fit_piecewise_affine(src, layout112, tri112)


def make_rng(seed=0):
    return np.random.default_rng(seed)
