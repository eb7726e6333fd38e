"""Shared fixtures and field builders for the test suite."""
import numpy as np
import pytest

from psfsim import GridSpec, PsfStack


def analytic_stack(fn, spec: GridSpec, timestamp: float = 0.0) -> PsfStack:
    """Fill a stack from fn(x, y, theta) evaluated at every node."""
    xs, ys = spec.cell_centers()
    vals = np.empty((spec.n_theta, spec.nx, spec.ny))
    for k in range(spec.n_theta):
        th = spec.layer_theta(k)
        for ix, x in enumerate(xs):
            for iy, y in enumerate(ys):
                vals[k, ix, iy] = fn(x, y, th)
    return PsfStack(spec, vals, timestamp)


@pytest.fixture
def small_spec() -> GridSpec:
    return GridSpec(origin_x=-1.0, origin_y=-1.0, resolution=0.1,
                    nx=21, ny=21, n_theta=4)


@pytest.fixture
def flat_spec() -> GridSpec:
    return GridSpec(origin_x=0.0, origin_y=0.0, resolution=0.05,
                    nx=41, ny=31, n_theta=1)
