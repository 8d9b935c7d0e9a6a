"""Periodic grids, sampled fields, and spectral calculus on the unit torus.

All grids discretize [0, 1) with uniformly spaced nodes ``x_i = i / n``.
Differentiation, interpolation, and two-scale diagonal evaluation are done
through the discrete Fourier transform, so they are exact (to rounding) for
band-limited fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, NumericalError, ParameterError, ResolutionError

TWO_PI = 2.0 * np.pi


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.isfinite(values).all():
        bad = np.argwhere(~np.isfinite(values))[0]
        raise NumericalError(f"{what} has a non-finite value at node index {tuple(bad)}")


def _frozen(values) -> np.ndarray:
    out = np.array(values, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform sampling of the unit torus with ``n_points`` nodes.

    ``n_points`` must be a power of two, at least 8; then the spacing
    ``1 / n_points`` is exact in binary floating point and
    ``spacing * n_points == 1`` holds exactly.
    """

    n_points: int

    def __post_init__(self) -> None:
        if self.n_points < 8 or not _is_power_of_two(self.n_points):
            raise ParameterError(
                f"grid size must be a power of two >= 8, got {self.n_points}"
            )

    @property
    def spacing(self) -> float:
        return 1.0 / self.n_points

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_points) / self.n_points

    def wavenumbers_rfft(self) -> np.ndarray:
        """Angular wavenumbers 2*pi*k for the rfft half-spectrum."""
        return TWO_PI * np.fft.rfftfreq(self.n_points, d=self.spacing)


@dataclass(frozen=True)
class ScalarField:
    """Real scalar samples on a periodic grid."""

    grid: PeriodicGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        values = _frozen(self.values)
        if values.shape != (self.grid.n_points,):
            raise GridMismatchError(
                f"expected {self.grid.n_points} samples, got shape {values.shape}"
            )
        _check_finite(values, "scalar field")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class VectorField3:
    """Three-component field on a periodic grid, stored as shape (3, n).

    With ``unit_constrained`` set, every node vector must have length one
    within ``unit_tol``.
    """

    grid: PeriodicGrid
    values: np.ndarray = field(repr=False)
    unit_constrained: bool = False
    unit_tol: float = 1e-9

    def __post_init__(self) -> None:
        values = _frozen(self.values)
        if values.shape != (3, self.grid.n_points):
            raise GridMismatchError(
                f"expected shape (3, {self.grid.n_points}), got {values.shape}"
            )
        _check_finite(values, "vector field")
        if self.unit_constrained:
            dev = np.abs(np.sqrt((values**2).sum(axis=0)) - 1.0).max()
            if dev > self.unit_tol:
                raise ParameterError(
                    f"unit constraint violated: max | |m| - 1 | = {dev:.3e} "
                    f"> {self.unit_tol:.1e}"
                )
        object.__setattr__(self, "values", values)

    def unit_deviation(self) -> float:
        return float(np.abs(np.sqrt((self.values**2).sum(axis=0)) - 1.0).max())


@dataclass(frozen=True)
class TwoScaleField3:
    """Three-component field sampled on a tensor grid (x_i, y_j).

    Values have shape (3, n_x, n_y); the field is periodic in both
    variables.  Axis 1 is the slow variable x, axis 2 the fast variable y.
    """

    slow_grid: PeriodicGrid
    fast_grid: PeriodicGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        values = _frozen(self.values)
        shape = (3, self.slow_grid.n_points, self.fast_grid.n_points)
        if values.shape != shape:
            raise GridMismatchError(f"expected shape {shape}, got {values.shape}")
        _check_finite(values, "two-scale field")
        object.__setattr__(self, "values", values)


# --- spectral differentiation --------------------------------------------

_DERIV_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _deriv_multiplier(n: int, order: int) -> np.ndarray:
    """(2*pi*i*k)^order on the rfft half-spectrum, Nyquist zeroed for odd order."""
    key = (n, order)
    mult = _DERIV_CACHE.get(key)
    if mult is None:
        k = TWO_PI * np.fft.rfftfreq(n, d=1.0 / n)
        mult = (1j * k) ** order
        if order % 2 == 1:
            mult[-1] = 0.0
        mult.setflags(write=False)
        _DERIV_CACHE[key] = mult
    return mult


def deriv_values(values: np.ndarray, order: int, axis: int = -1) -> np.ndarray:
    """Spectral derivative of raw samples along ``axis``.

    The array is transformed with the real FFT, each mode k is multiplied by
    (2*pi*i*k)^order, and the Nyquist mode is zeroed for odd orders so real
    fields stay real.
    """
    if order == 0:
        return np.array(values, dtype=float)
    n = values.shape[axis]
    mult = _deriv_multiplier(n, order)
    spec = np.fft.rfft(values, axis=axis)
    shape = [1] * spec.ndim
    shape[axis] = spec.shape[axis]
    spec *= mult.reshape(shape)
    return np.fft.irfft(spec, n=n, axis=axis)


def spectral_derivative(f, order: int = 1):
    """Order-th spectral derivative of a ScalarField or VectorField3.

    Exact for band-limited inputs.  ``order`` may not exceed half the grid
    size; non-finite inputs are rejected with the offending node named.
    """
    if order < 0:
        raise ParameterError(f"derivative order must be >= 0, got {order}")
    if isinstance(f, ScalarField):
        grid = f.grid
    elif isinstance(f, VectorField3):
        grid = f.grid
    else:
        raise TypeError(f"cannot differentiate object of type {type(f).__name__}")
    if order > grid.n_points // 2:
        raise ResolutionError(
            f"order {order} exceeds n_points/2 = {grid.n_points // 2}"
        )
    out = deriv_values(f.values, order, axis=-1)
    if isinstance(f, ScalarField):
        return ScalarField(grid, out)
    return VectorField3(grid, out)


def ts_dx(u: TwoScaleField3, order: int = 1) -> TwoScaleField3:
    """Spectral derivative of a two-scale field along the slow variable."""
    return TwoScaleField3(u.slow_grid, u.fast_grid, deriv_values(u.values, order, axis=1))


def ts_dy(u: TwoScaleField3, order: int = 1) -> TwoScaleField3:
    """Spectral derivative of a two-scale field along the fast variable."""
    return TwoScaleField3(u.slow_grid, u.fast_grid, deriv_values(u.values, order, axis=2))


# --- trigonometric interpolation ------------------------------------------


def resample_values(values: np.ndarray, n_out: int, axis: int = -1) -> np.ndarray:
    """Trigonometric interpolation of samples onto ``n_out`` uniform nodes.

    Zero-pads the half-spectrum.  When upsampling, the input Nyquist
    coefficient is halved: on the coarse grid it represents a pure cosine
    with weight 1, and on the finer grid the same mode is an ordinary
    conjugate pair with weight 2.
    """
    n_in = values.shape[axis]
    if n_out == n_in:
        return np.array(values, dtype=float)
    if n_out < n_in:
        raise ParameterError("resample_values only refines; coarsening loses modes")
    spec = np.fft.rfft(values, axis=axis)
    out_shape = list(spec.shape)
    out_shape[axis] = n_out // 2 + 1
    padded = np.zeros(out_shape, dtype=complex)
    sl_in = [slice(None)] * spec.ndim
    sl_in[axis] = slice(0, n_in // 2)
    padded[tuple(sl_in)] = np.take(spec, range(n_in // 2), axis=axis)
    sl_nyq = [slice(None)] * spec.ndim
    sl_nyq[axis] = n_in // 2
    padded[tuple(sl_nyq)] = 0.5 * np.take(spec, [n_in // 2], axis=axis).squeeze(axis)
    return np.fft.irfft(padded, n=n_out, axis=axis) * (n_out / n_in)


def refine_field(f, target: PeriodicGrid):
    """Trigonometric interpolation of a field onto a finer grid.

    Coarsening requests are rejected; deliberate truncation must be done
    through the spectrum explicitly.
    """
    if target.n_points < f.grid.n_points:
        raise ParameterError(
            f"refine_field cannot coarsen {f.grid.n_points} -> {target.n_points}"
        )
    out = resample_values(f.values, target.n_points, axis=-1)
    if isinstance(f, ScalarField):
        return ScalarField(target, out)
    return VectorField3(target, out, unit_constrained=False)


def evaluate_diagonal(u: TwoScaleField3, eps: float, out_grid: PeriodicGrid) -> VectorField3:
    """Evaluate u(x, x/eps mod 1) on ``out_grid`` by trigonometric interpolation.

    The slow content is refined onto the output grid by zero padding; the
    fast variable is then evaluated at y = x/eps per output node.  The
    output grid must resolve both the slow grid and the oscillation
    wavelength (n_points >= 8 / eps).
    """
    if not (0.0 < eps < 1.0):
        raise ParameterError(f"eps must lie in (0, 1), got {eps}")
    if out_grid.n_points < u.slow_grid.n_points:
        raise ResolutionError(
            f"output grid ({out_grid.n_points}) must resolve the slow grid "
            f"({u.slow_grid.n_points})"
        )
    if out_grid.n_points < 8.0 / eps:
        raise ResolutionError(
            f"output grid too coarse for eps={eps}: need n_points >= "
            f"{int(np.ceil(8.0 / eps))}, got {out_grid.n_points}"
        )
    vals = resample_values(u.values, out_grid.n_points, axis=1)  # (3, n_out, n_y)
    x = out_grid.nodes
    y_targets = np.mod(x / eps, 1.0)
    n_y = u.fast_grid.n_points
    spec = np.fft.fft(vals, axis=2) / n_y  # (3, n_out, n_y)
    k = np.fft.fftfreq(n_y, d=1.0 / n_y)  # signed integer wavenumbers
    phases = np.exp(2j * np.pi * y_targets[:, None] * k[None, :])  # (n_out, n_y)
    # real input: replace the e^{i*pi*n_y*y} Nyquist phase by its cosine
    nyq = np.argmin(np.abs(k - (-n_y // 2)))
    phases[:, nyq] = np.cos(np.pi * n_y * y_targets)
    out = np.einsum("cij,ij->ci", spec, phases).real
    return VectorField3(out_grid, out)


def eval_scalar_periodic(f: ScalarField, targets: np.ndarray) -> np.ndarray:
    """Trigonometric interpolant of a scalar field at arbitrary torus points."""
    n = f.grid.n_points
    spec = np.fft.fft(f.values) / n
    k = np.fft.fftfreq(n, d=1.0 / n)
    phases = np.exp(2j * np.pi * np.asarray(targets)[:, None] * k[None, :])
    nyq = np.argmin(np.abs(k - (-n // 2)))
    phases[:, nyq] = np.cos(np.pi * n * np.asarray(targets))
    return (phases @ spec).real
