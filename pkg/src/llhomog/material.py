"""Material coefficients, the periodic cell problem, and the effective coefficient.

The cell corrector solves d/dy ( a(y) d/dy chi ) = -da/dy on the unit cell
with zero mean.  In one dimension periodicity forces the flux a (1 + chi')
to be the constant harmonic mean of a, so the solver uses the closed form
chi' = A*/a - 1 with A* = ( mean of 1/a )^-1 and cross-checks it against an
independent spectral collocation solve of the divergence-form equation.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ConsistencyError, ParameterError, ResolutionError
from .grid import (
    PeriodicGrid,
    ScalarField,
    deriv_values,
    eval_scalar_periodic,
)

CELL_TOL = 1e-8


@dataclass(frozen=True)
class MaterialCoefficient:
    """Samples of the periodic coefficient a(y) on the fast grid."""

    fast_samples: ScalarField
    a_min: float
    a_max: float
    analytic_tag: str | None = None

    @property
    def grid(self) -> PeriodicGrid:
        return self.fast_samples.grid

    @property
    def values(self) -> np.ndarray:
        return self.fast_samples.values

    @classmethod
    def from_samples(cls, samples: ScalarField, tag: str | None = None) -> "MaterialCoefficient":
        a_min = float(samples.values.min())
        a_max = float(samples.values.max())
        if a_min <= 0.0:
            raise ParameterError(
                f"coefficient must be strictly positive; sampled minimum is {a_min:.6g}"
            )
        return cls(fast_samples=samples, a_min=a_min, a_max=a_max, analytic_tag=tag)


@dataclass(frozen=True)
class CoefficientSpec:
    """One of the built-in coefficient families.

    kind 'constant' uses ``value``; 'sinusoidal' is 1 + value*sin(2 pi y)
    with |value| < 1; 'table' re-interpolates user samples (given on their
    own uniform grid) spectrally.
    """

    kind: str
    value: float = 1.0
    table: np.ndarray | None = dc_field(default=None, repr=False)

    @classmethod
    def parse(cls, text: str) -> "CoefficientSpec":
        """Parse 'constant:<c>' or 'sinusoidal:<b>' (used by the config layer)."""
        parts = text.split(":")
        kind = parts[0].strip()
        if kind in ("constant", "sinusoidal"):
            if len(parts) != 2:
                raise ParameterError(f"coefficient spec '{text}' needs one parameter")
            return cls(kind=kind, value=float(parts[1]))
        raise ParameterError(f"unknown coefficient family '{kind}'")


def build_coefficient(spec: CoefficientSpec, fast_grid: PeriodicGrid) -> MaterialCoefficient:
    """Sample one of the built-in coefficient families on the fast grid."""
    y = fast_grid.nodes
    if spec.kind == "constant":
        vals = np.full(fast_grid.n_points, float(spec.value))
        tag = f"constant {spec.value:g}"
    elif spec.kind == "sinusoidal":
        if abs(spec.value) >= 1.0:
            raise ParameterError(
                f"sinusoidal amplitude must satisfy |b| < 1, got {spec.value}"
            )
        vals = 1.0 + spec.value * np.sin(2 * np.pi * y)
        tag = f"1 + {spec.value:g} sin(2 pi y)"
    elif spec.kind == "table":
        if spec.table is None:
            raise ParameterError("table coefficient spec requires samples")
        src = ScalarField(PeriodicGrid(len(spec.table)), np.asarray(spec.table, float))
        vals = eval_scalar_periodic(src, y)
        tag = "user table"
    else:
        raise ParameterError(f"unknown coefficient family '{spec.kind}'")
    return MaterialCoefficient.from_samples(ScalarField(fast_grid, vals), tag)


@dataclass(frozen=True)
class CellSolution:
    """Cell corrector chi with the scalar effective coefficient."""

    chi: ScalarField
    a_h: float
    residual_sup: float
    path_discrepancy: float

    @property
    def grid(self) -> PeriodicGrid:
        return self.chi.grid


def _spectral_antiderivative(values: np.ndarray) -> np.ndarray:
    """Zero-mean periodic antiderivative; the input must have zero mean."""
    n = len(values)
    spec = np.fft.rfft(values)
    k = 2 * np.pi * np.fft.rfftfreq(n, d=1.0 / n)
    out = np.zeros_like(spec)
    out[1:] = spec[1:] / (1j * k[1:])
    out[-1] = 0.0  # Nyquist dropped, consistent with odd-order derivatives
    vals = np.fft.irfft(out, n=n)
    return vals - vals.mean()


def _solve_cell_collocation(a: np.ndarray) -> np.ndarray:
    """Generic path: spectral collocation of d/dy(a chi') = -a' on mean-zero modes."""
    n = len(a)
    eye = np.eye(n)
    deriv = deriv_values(eye, 1, axis=0)  # D applied to each basis column
    op = deriv @ (a[:, None] * deriv)
    rhs = -deriv_values(a, 1, axis=-1)
    # pin the mean: append the zero-average constraint row
    aug = np.vstack([op, np.full((1, n), 1.0 / n)])
    rhs_aug = np.concatenate([rhs, [0.0]])
    chi, *_ = np.linalg.lstsq(aug, rhs_aug, rcond=None)
    return chi - chi.mean()


def solve_cell_problem(a: MaterialCoefficient, cell_tol: float = CELL_TOL) -> CellSolution:
    """Solve the cell problem on the coefficient's grid.

    Runs both the 1D closed form and the generic collocation solve; a
    discrepancy beyond 1e-8 or a substitution residual beyond ``cell_tol``
    raises ConsistencyError.
    """
    vals = a.values
    a_star = 1.0 / np.mean(1.0 / vals)
    chi_prime = a_star / vals - 1.0
    chi_closed = _spectral_antiderivative(chi_prime)
    chi_generic = _solve_cell_collocation(vals)
    discrepancy = float(np.abs(chi_closed - chi_generic).max())
    if discrepancy > 1e-8:
        raise ConsistencyError(
            f"cell solver paths disagree: sup |closed - generic| = {discrepancy:.3e}"
        )
    dchi = deriv_values(chi_closed, 1, axis=-1)
    residual = deriv_values(vals * dchi, 1, axis=-1) + deriv_values(vals, 1, axis=-1)
    residual_sup = float(np.abs(residual).max())
    if residual_sup > cell_tol:
        raise ConsistencyError(
            f"cell residual sup {residual_sup:.3e} exceeds tolerance {cell_tol:.1e}"
        )
    chi_field = ScalarField(a.grid, chi_closed)
    if abs(chi_closed.mean()) > 1e-12:
        raise ConsistencyError("cell corrector mean not zero after subtraction")
    if not (a.a_min <= a_star <= a.a_max):
        raise ConsistencyError(
            f"effective coefficient {a_star:.6g} outside [{a.a_min:.6g}, {a.a_max:.6g}]"
        )
    return CellSolution(chi=chi_field, a_h=float(a_star),
                        residual_sup=residual_sup, path_discrepancy=discrepancy)


def homogenized_coefficient(a: MaterialCoefficient, cell: CellSolution) -> float:
    """Effective coefficient as the cell-average flux, mean of a (1 + chi').

    In 1D this must coincide with the harmonic mean stored in the cell
    solution; a mismatch beyond 1e-10 indicates an inconsistent pairing.
    """
    if cell.grid.n_points != a.grid.n_points:
        raise ParameterError("cell solution was computed on a different grid")
    flux = a.values * (1.0 + deriv_values(cell.chi.values, 1, axis=-1))
    a_h = float(flux.mean())
    if abs(a_h - cell.a_h) > 1e-10:
        raise ConsistencyError(
            f"flux average {a_h:.12g} differs from harmonic mean {cell.a_h:.12g}"
        )
    return a_h


def sample_eps_coefficient(a: MaterialCoefficient, eps: float,
                           fine_grid: PeriodicGrid) -> ScalarField:
    """Sample a(x/eps mod 1) on the fine grid by trigonometric interpolation."""
    if not (0.0 < eps < 1.0):
        raise ParameterError(f"eps must lie in (0, 1), got {eps}")
    if fine_grid.n_points < 8.0 / eps:
        raise ResolutionError(
            f"fine grid must resolve eps={eps}: need n_points >= "
            f"{int(np.ceil(8.0 / eps))}, got {fine_grid.n_points}"
        )
    targets = np.mod(fine_grid.nodes / eps, 1.0)
    return ScalarField(fine_grid, eval_scalar_periodic(a.fast_samples, targets))


def cell_csv_rows(a: MaterialCoefficient, cell: CellSolution):
    """Rows (y, a, chi, flux) for the `cell` command CSV export."""
    dchi = deriv_values(cell.chi.values, 1, axis=-1)
    flux = a.values * (1.0 + dchi)
    y = a.grid.nodes
    return [(y[i], a.values[i], cell.chi.values[i], flux[i]) for i in range(len(y))]
