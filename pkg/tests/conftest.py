"""Shared fixtures: coefficient/cell pairs and smooth orientation slices."""

import numpy as np
import pytest

from llhomog.correctors import ProjectionContext
from llhomog.grid import PeriodicGrid, TwoScaleField3
from llhomog.llg import build_initial_data
from llhomog.material import CoefficientSpec, build_coefficient, solve_cell_problem


@pytest.fixture(scope="session")
def material32():
    """Sinusoidal coefficient whose cell corrector is resolved on 32 points.

    Amplitude 0.25 keeps the corrector's spectral tail below the cell
    residual tolerance at this resolution; the reference amplitude 0.5
    needs 64+ fast points and is exercised at acceptance scale.
    """
    return build_coefficient(CoefficientSpec("sinusoidal", 0.25), PeriodicGrid(32))


@pytest.fixture(scope="session")
def cell32(material32):
    return solve_cell_problem(material32)


@pytest.fixture(scope="session")
def material16():
    """Coarse fast grid for operator algebra; too coarse for a cell solve at b=0.5."""
    return build_coefficient(CoefficientSpec("sinusoidal", 0.5), PeriodicGrid(16))


@pytest.fixture(scope="session")
def material16_soft():
    """Low-amplitude coefficient whose corrector is resolved on 16 points."""
    return build_coefficient(CoefficientSpec("sinusoidal", 0.1), PeriodicGrid(16))


@pytest.fixture(scope="session")
def cell16_soft(material16_soft):
    return solve_cell_problem(material16_soft)


@pytest.fixture
def ctx64():
    """Smooth nonconstant unit orientation slice on a 64-point slow grid."""
    return ProjectionContext(build_initial_data("fig1", PeriodicGrid(64)))


@pytest.fixture
def ctx32():
    return ProjectionContext(build_initial_data("fig1", PeriodicGrid(32)))


def random_two_scale(rng, slow, fast, kx=4, ky=4, amplitude=1.0):
    """Band-limited random two-scale field (helper, not a fixture)."""
    vals = np.zeros((3, slow.n_points, fast.n_points))
    x = slow.nodes[:, None]
    y = fast.nodes[None, :]
    for c in range(3):
        for jx in range(kx):
            for jy in range(ky):
                a, b, cc, d = rng.standard_normal(4) * amplitude / (kx * ky)
                vals[c] += (
                    a * np.cos(2 * np.pi * (jx * x + jy * y))
                    + b * np.sin(2 * np.pi * (jx * x + jy * y))
                    + cc * np.cos(2 * np.pi * (jx * x - jy * y))
                    + d * np.sin(2 * np.pi * (jx * x - jy * y))
                )
    return TwoScaleField3(slow, fast, vals)
