"""Error norms, residual diagnostics, and rate fitting for eps sweeps.

The residual of a corrected approximation is what is left after inserting it
into the fine-scale equation: time derivative by 4th-order central
differencing over densely sampled snapshots, spatial terms spectral with the
oscillatory coefficient sampled on the snapshot grid.  Rate fits are least
squares in log-log coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import GridMismatchError, ParameterError
from .grid import ScalarField, VectorField3
from .llg import LLOperatorContext, cross3
from .norms import NormReport, norm_report


def compute_error(fine_state: VectorField3, m_tilde: VectorField3,
                  q_list=(0, 1), eps: float | None = None) -> NormReport:
    """Sobolev norms of the difference between two states on one grid."""
    if fine_state.grid.n_points != m_tilde.grid.n_points:
        raise GridMismatchError("states live on different grids")
    diff = VectorField3(fine_state.grid, fine_state.values - m_tilde.values)
    return norm_report(diff, q_list=q_list, eps=eps)


def length_deviation(m_tilde: VectorField3, q_list=(0, 1),
                     eps: float | None = None) -> NormReport:
    """Norms of |m|^2 - 1, the length drift of a corrected approximation."""
    sq = (m_tilde.values**2).sum(axis=0) - 1.0
    return norm_report(ScalarField(m_tilde.grid, sq), q_list=q_list, eps=eps)


_STENCIL_4TH = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0


def residual_eta(snapshots, a_eps: ScalarField, alpha: float,
                 dt_stencil: float) -> VectorField3:
    """Residual of the governing equation on a 5-point time stencil.

    ``snapshots`` are >= 5 states at uniform spacing ``dt_stencil`` centered
    at the evaluation time (the middle entry).  Returns
    dt m + m x Lm + alpha m x m x Lm at the center, with dt m by 4th-order
    central differencing.
    """
    snapshots = list(snapshots)
    if len(snapshots) < 5 or len(snapshots) % 2 == 0:
        raise ParameterError("residual needs an odd number >= 5 of snapshots")
    if dt_stencil <= 0:
        raise ParameterError("dt_stencil must be positive")
    mid = len(snapshots) // 2
    stencil = snapshots[mid - 2: mid + 3]
    grid = stencil[2].grid
    for s in stencil:
        if s.grid.n_points != grid.n_points:
            raise GridMismatchError("stencil states live on different grids")
    dmdt = sum(w * s.values for w, s in zip(_STENCIL_4TH, stencil)) / dt_stencil
    center = stencil[2]
    ctx = LLOperatorContext(a_eps, alpha, grid)
    h = ctx.exchange_raw(center.values)
    mxh = cross3(center.values, h)
    eta = dmdt + mxh + alpha * cross3(center.values, mxh)
    return VectorField3(grid, eta)


def fit_rate(points) -> tuple[float, float, float]:
    """Least-squares line through (log eps, log value).

    Returns (slope, intercept, r_squared).  Values must be positive and the
    eps distinct; at least three points are required.
    """
    points = sorted(points)
    if len(points) < 3:
        raise ParameterError("rate fit needs at least 3 points")
    eps = np.array([p[0] for p in points])
    vals = np.array([p[1] for p in points])
    for i, v in enumerate(vals):
        if v <= 0:
            raise ParameterError(f"cannot fit a rate through value {v} at index {i}")
    if len(np.unique(eps)) != len(eps):
        raise ParameterError("eps values must be distinct")
    x, y = np.log(eps), np.log(vals)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot < 1e-300 else 1.0 - float((resid**2).sum()) / ss_tot
    return float(slope), float(intercept), r2


def fit_decay(points, tau_min: float = 0.5) -> tuple[float, float]:
    """Exponential decay rate of norms over fast time.

    Fits log(norm) against tau for samples with tau >= ``tau_min`` (skipping
    the initial transient) and returns (positive decay rate, r_squared).
    """
    kept = [(t, v) for t, v in points if t >= tau_min]
    if len(kept) < 4:
        raise ParameterError("decay fit needs at least 4 points past tau_min")
    taus = np.array([t for t, _ in kept])
    vals = np.array([v for _, v in kept])
    for i, v in enumerate(vals):
        if v <= 0:
            raise ParameterError(f"cannot fit decay through value {v} at index {i}")
    slope, intercept = np.polyfit(taus, np.log(vals), 1)
    resid = np.log(vals) - (slope * taus + intercept)
    ss_tot = float(((np.log(vals) - np.log(vals).mean()) ** 2).sum())
    r2 = 1.0 if ss_tot < 1e-300 else 1.0 - float((resid**2).sum()) / ss_tot
    return float(-slope), r2


@dataclass(frozen=True)
class ErrorRecord:
    """Error diagnostics of one (eps, J) comparison at its final time."""

    eps: float
    sigma: float
    J: int
    t_final: float
    err: NormReport
    eta: NormReport | None
    len_dev: NormReport
    grad_inf_fine: float

    def __post_init__(self) -> None:
        if not (0.0 < self.eps < 1.0):
            raise ParameterError(f"eps must lie in (0, 1), got {self.eps}")


@dataclass(frozen=True)
class SweepResult:
    """Fitted convergence rate over a family of eps at common (sigma, J)."""

    records: tuple
    fitted_slope: float
    fitted_intercept: float
    r_squared: float
    norm_key: str = "err_L2"

    def __post_init__(self) -> None:
        if len(self.records) < 3:
            raise ParameterError("a sweep needs at least 3 eps values")


_NORM_KEYS = {
    "err_L2": lambda r: r.err.hq.get(0, r.err.l2),
    "err_H1": lambda r: r.err.hq.get(1, float("nan")),
    "eta_L2": lambda r: r.eta.l2 if r.eta is not None else float("nan"),
    "len_dev_L2": lambda r: r.len_dev.l2,
}


def record_value(record: ErrorRecord, norm_key: str) -> float:
    try:
        return _NORM_KEYS[norm_key](record)
    except KeyError:
        raise ParameterError(f"unknown norm key '{norm_key}'") from None


def fit_sweep(records, norm_key: str = "err_L2") -> SweepResult:
    """Fit the log-log rate of one norm across the records of a sweep."""
    records = tuple(sorted(records, key=lambda r: r.eps))
    points = [(r.eps, record_value(r, norm_key)) for r in records]
    slope, intercept, r2 = fit_rate(points)
    return SweepResult(records=records, fitted_slope=slope,
                       fitted_intercept=intercept, r_squared=r2,
                       norm_key=norm_key)


def sweep_csv_rows(records):
    """Rows for the sweep CSV: one per record, fixed column order."""
    rows = []
    for r in sorted(records, key=lambda rec: rec.eps):
        rows.append((
            r.eps, r.sigma, r.J, r.t_final,
            r.err.hq.get(0, r.err.l2),
            r.err.hq.get(1, float("nan")),
            r.eta.l2 if r.eta is not None else float("nan"),
            r.len_dev.l2,
            r.grad_inf_fine,
        ))
    return rows


SWEEP_CSV_HEADER = ("eps", "sigma", "J", "t_final", "err_L2", "err_H1",
                    "eta_L2", "len_dev_L2", "grad_inf_fine")
