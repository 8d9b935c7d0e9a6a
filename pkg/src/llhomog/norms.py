"""Discrete Sobolev, Bochner-Sobolev, multiscale, and sup norms.

Integrals over the torus use the periodic trapezoid rule (the plain node
mean), which is spectrally accurate and exact for band-limited integrands.
In one dimension the multi-index sums collapse to single derivative orders,
so H^q is sum over orders 0..q of squared L2 norms of spectral derivatives.
Sup norms are grid maxima: lower bounds of the true supremum, accurate up to
one-node sampling error.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ParameterError, ResolutionError
from .grid import ScalarField, TwoScaleField3, VectorField3, deriv_values


def _values_of(f) -> tuple[np.ndarray, int]:
    """Raw samples and the grid size of the differentiation axis."""
    if isinstance(f, (ScalarField, VectorField3)):
        return f.values, f.grid.n_points
    if isinstance(f, np.ndarray):
        return f, f.shape[-1]
    raise TypeError(f"unsupported field type {type(f).__name__}")


def _l2_sq(values: np.ndarray, n_space_axes: int = 1) -> float:
    """Squared L2 norm: node mean over space, sum over components."""
    sq = values**2
    for _ in range(n_space_axes):
        sq = sq.mean(axis=-1)
    return float(np.sum(sq))


def norm_l2(f) -> float:
    values, _ = _values_of(f)
    return float(np.sqrt(_l2_sq(values)))


def norm_hq(f, q: int) -> float:
    """Sobolev norm sqrt(sum_{j<=q} ||D^j f||_L2^2) with spectral derivatives."""
    values, n = _values_of(f)
    if q < 0:
        raise ParameterError(f"q must be >= 0, got {q}")
    if q > n // 4:
        raise ResolutionError(f"order q={q} is not resolved on {n} points (q <= n/4)")
    total = 0.0
    for j in range(q + 1):
        total += _l2_sq(deriv_values(values, j, axis=-1))
    return float(np.sqrt(total))


def norm_hq_eps(f, q: int, eps: float) -> float:
    """Multiscale norm sum_{j<=q} eps^j ||f||_{H^j}."""
    if not (0.0 < eps <= 1.0):
        raise ParameterError(f"eps must lie in (0, 1], got {eps}")
    return float(sum(eps**j * norm_hq(f, j) for j in range(q + 1)))


def norm_hqp(u: TwoScaleField3, q: int, p: int) -> float:
    """Bochner-Sobolev norm over (x, y): all mixed derivatives up to (q, p)."""
    n_x, n_y = u.slow_grid.n_points, u.fast_grid.n_points
    if q > n_x // 4 or p > n_y // 4:
        raise ResolutionError(f"orders (q={q}, p={p}) not resolved on ({n_x}, {n_y})")
    total = 0.0
    for beta in range(q + 1):
        dxu = deriv_values(u.values, beta, axis=1)
        for gamma in range(p + 1):
            total += _l2_sq(deriv_values(dxu, gamma, axis=2), n_space_axes=2)
    return float(np.sqrt(total))


def norm_linf(f) -> float:
    """Grid maximum of the pointwise Euclidean magnitude."""
    values, _ = _values_of(f)
    if values.ndim >= 2:
        mag = np.sqrt((values**2).sum(axis=0))
    else:
        mag = np.abs(values)
    return float(mag.max())


def norm_wq_inf(f, q: int) -> float:
    """Max over derivative orders 0..q of the grid sup norm."""
    values, n = _values_of(f)
    if q > n // 4:
        raise ResolutionError(f"order q={q} is not resolved on {n} points")
    return max(norm_linf(deriv_values(values, j, axis=-1)) for j in range(q + 1))


@dataclass(frozen=True)
class NormReport:
    """Bundle of norms of one field; hq[0] equals l2 by construction."""

    l2: float
    hq: dict[int, float] = dc_field(default_factory=dict)
    hq_eps: dict[int, float] = dc_field(default_factory=dict)
    linf: float = 0.0
    wq_inf: dict[int, float] = dc_field(default_factory=dict)


def norm_report(f, q_list=(0, 1), eps: float | None = None) -> NormReport:
    """Evaluate the standard norm set of a field for the orders in q_list."""
    hq = {q: norm_hq(f, q) for q in q_list}
    hq_eps = {q: norm_hq_eps(f, q, eps) for q in q_list} if eps is not None else {}
    wq = {q: norm_wq_inf(f, q) for q in q_list}
    return NormReport(l2=hq.get(0, norm_l2(f)), hq=hq, hq_eps=hq_eps,
                      linf=norm_linf(f), wq_inf=wq)
