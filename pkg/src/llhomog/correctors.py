"""Two-scale corrector calculus for the oscillatory-coefficient dynamics.

This module implements the operator splitting of the exchange operator over
slow and fast variables, the cell-average and orientation projections, the
recursion quantities feeding the corrector forcings, and the fast-time
evolution of the first and second correctors.

Conventions
-----------
Two-scale arrays have shape (3, n_x, n_y).  The base orientation field m0
lives on the slow grid and is broadcast over the fast axis where needed.
The fast-time evolution freezes m0 (slow time is a parameter); the physical
diagonal tau = t / eps^2 is handled by `corrected_trajectory`, which
refreshes the frozen slice from the homogenized trajectory at configurable
fast-time checkpoints.

Operator scalings, for stability bookkeeping: the fast-scale operator is a
variable-coefficient second derivative in y, so explicit RK4 in tau needs
dtau <= 0.2 h_y^2 / a_max (the imaginary-axis stability region covers the
precession part at the same scale).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ConsistencyError, GridMismatchError, NumericalError, ParameterError
from .grid import PeriodicGrid, TwoScaleField3, VectorField3, deriv_values, evaluate_diagonal, refine_field
from .llg import LLOperatorContext, advance, build_initial_data, cross3, dot3, stable_dt
from .material import CellSolution, MaterialCoefficient

CORRECTOR_TOL = 1e-8
TAU_REFRESH_DEFAULT = 0.25


# --- contexts ---------------------------------------------------------------


@dataclass(frozen=True)
class ProjectionContext:
    """Frozen homogenized slice m0(., t) driving the fast-scale operators."""

    m0_slice: VectorField3

    def __post_init__(self) -> None:
        if not self.m0_slice.unit_constrained:
            dev = self.m0_slice.unit_deviation()
            if dev > 1e-9:
                raise ParameterError(
                    f"projection context needs a unit slice; deviation {dev:.2e}"
                )

    @property
    def slow_grid(self) -> PeriodicGrid:
        return self.m0_slice.grid

    @property
    def m0_b(self) -> np.ndarray:
        """m0 broadcast over the fast axis, shape (3, n_x, 1)."""
        return self.m0_slice.values[:, :, None]

    @property
    def dx_m0(self) -> np.ndarray:
        return deriv_values(self.m0_slice.values, 1, axis=-1)


def _as_two_scale(values: np.ndarray, like: TwoScaleField3) -> TwoScaleField3:
    return TwoScaleField3(like.slow_grid, like.fast_grid, values)


def _check_fast(u: TwoScaleField3, a: MaterialCoefficient) -> None:
    if u.fast_grid.n_points != a.grid.n_points:
        raise GridMismatchError("coefficient grid differs from the field's fast grid")


def m0_as_two_scale(ctx: ProjectionContext, fast_grid: PeriodicGrid) -> TwoScaleField3:
    """The slow slice viewed as a (constant in y) two-scale field."""
    vals = np.repeat(ctx.m0_b, fast_grid.n_points, axis=2)
    return TwoScaleField3(ctx.slow_grid, fast_grid, vals)


# --- split exchange operators -----------------------------------------------


def _l0_raw(u: np.ndarray, a: np.ndarray) -> np.ndarray:
    # d/dx ( a(y) d/dx u ) = a(y) u_xx since a carries no x dependence
    return a[None, None, :] * deriv_values(u, 2, axis=1)


def _l1_raw(u: np.ndarray, a: np.ndarray) -> np.ndarray:
    dxu = deriv_values(u, 1, axis=1)
    mixed = a[None, None, :] * deriv_values(dxu, 1, axis=2)
    return mixed + deriv_values(a[None, None, :] * dxu, 1, axis=2)


def _l2_raw(u: np.ndarray, a: np.ndarray) -> np.ndarray:
    dyu = deriv_values(u, 1, axis=2)
    return deriv_values(a[None, None, :] * dyu, 1, axis=2)


def op_L0(u: TwoScaleField3, a: MaterialCoefficient) -> TwoScaleField3:
    """Slow-slow part of the split exchange operator."""
    _check_fast(u, a)
    return _as_two_scale(_l0_raw(u.values, a.values), u)


def op_L1(u: TwoScaleField3, a: MaterialCoefficient) -> TwoScaleField3:
    """Mixed slow-fast part: d/dx(a d/dy u) + d/dy(a d/dx u)."""
    _check_fast(u, a)
    return _as_two_scale(_l1_raw(u.values, a.values), u)


def op_L2(u: TwoScaleField3, a: MaterialCoefficient) -> TwoScaleField3:
    """Fast-fast part: d/dy ( a(y) d/dy u )."""
    _check_fast(u, a)
    return _as_two_scale(_l2_raw(u.values, a.values), u)


def _script_l_from_l2(l2w: np.ndarray, m0_b: np.ndarray, alpha: float) -> np.ndarray:
    mx = cross3(m0_b, l2w)
    return -mx - alpha * cross3(m0_b, mx)


def script_L(w: TwoScaleField3, ctx: ProjectionContext, a: MaterialCoefficient,
             alpha: float) -> TwoScaleField3:
    """Fast-scale linearized operator -m0 x L2 w - alpha m0 x m0 x L2 w."""
    _check_fast(w, a)
    return _as_two_scale(_script_l_from_l2(_l2_raw(w.values, a.values), ctx.m0_b, alpha), w)


# --- projections --------------------------------------------------------------


def averaging_A(u: TwoScaleField3) -> VectorField3:
    """Cell average over the fast variable."""
    return VectorField3(u.slow_grid, u.values.mean(axis=2))


def projection_M(v, ctx: ProjectionContext):
    """Pointwise orthogonal projection onto the m0 direction."""
    if isinstance(v, VectorField3):
        m0 = ctx.m0_slice.values
        return VectorField3(v.grid, m0 * dot3(m0, v.values))
    m0_b = ctx.m0_b
    return _as_two_scale(m0_b * dot3(m0_b, v.values), v)


def _p_raw(u: np.ndarray, m0_b: np.ndarray) -> np.ndarray:
    w = u - u.mean(axis=2, keepdims=True)
    return w - m0_b * dot3(m0_b, w)


def _q_raw(u: np.ndarray, m0_b: np.ndarray) -> np.ndarray:
    avg = u.mean(axis=2, keepdims=True)
    return m0_b * dot3(m0_b, u) + (avg - m0_b * dot3(m0_b, avg))


def proj_P(u: TwoScaleField3, ctx: ProjectionContext) -> TwoScaleField3:
    """Part orthogonal to m0 with zero cell average: (I - M)(I - A) u."""
    return _as_two_scale(_p_raw(u.values, ctx.m0_b), u)


def proj_Q(u: TwoScaleField3, ctx: ProjectionContext) -> TwoScaleField3:
    """Complement M u + (I - M) A u, which equals identity minus P."""
    return _as_two_scale(_q_raw(u.values, ctx.m0_b), u)


# --- recursion quantities and forcings ----------------------------------------


@dataclass(frozen=True)
class RecursionBundle:
    """Quantities at one recursion index j; V and T are None at j = 0."""

    j: int
    z: TwoScaleField3
    v: TwoScaleField3 | None
    t: TwoScaleField3 | None
    r: TwoScaleField3
    s: TwoScaleField3


def _states_raw(states, ctx: ProjectionContext, fast_grid: PeriodicGrid) -> dict[int, np.ndarray]:
    """Raw arrays for indices present in ``states`` plus the broadcast m0."""
    out = {0: np.repeat(ctx.m0_b, fast_grid.n_points, axis=2)}
    for j, field in states.items():
        if j == 0:
            continue
        out[j] = field.values
    return out


def recursion_quantities(states, ctx: ProjectionContext, a: MaterialCoefficient,
                         j: int) -> RecursionBundle:
    """Z, V, T, R, S at index j from the correctors m_k, k <= j.

    ``states`` maps the corrector index to its TwoScaleField3 (index 0 may be
    omitted; the broadcast context slice is used).  Following the recursion,
    Z_0 is the mixed operator applied to m0, V_j = L2 m_j + Z_{j-1}, and
    T/R/S are the cross-product sums with m_{-1} := 0.
    """
    if j < 0:
        raise ParameterError("recursion index must be >= 0")
    some = next(iter(states.values()))
    fast_grid = some.fast_grid
    raw = _states_raw(states, ctx, fast_grid)
    for k in range(1, j + 1):
        if k not in raw:
            raise ParameterError(f"recursion at j={j} needs corrector m_{k}")
    av = a.values

    def z_at(k: int) -> np.ndarray:
        if k == 0:
            return _l1_raw(raw[0], av)
        return _l0_raw(raw[k - 1], av) + _l1_raw(raw[k], av)

    def v_at(k: int) -> np.ndarray:
        return _l2_raw(raw[k], av) + z_at(k - 1)

    like = states[max(states)] if j == 0 else states[j]
    z_j = _as_two_scale(z_at(j), like)
    if j == 0:
        zero = _as_two_scale(np.zeros_like(raw[0]), like)
        return RecursionBundle(j=0, z=z_j, v=None, t=None, r=zero, s=zero)

    v_cache = {k: v_at(k) for k in range(1, j + 1)}
    t_cache = {k: sum(cross3(raw[k - i], v_cache[i]) for i in range(1, k + 1))
               for k in range(1, j + 1)}
    r_j = sum(cross3(raw[j + 1 - k], v_cache[k]) for k in range(1, j + 1))
    s_j = sum(cross3(raw[j + 1 - k], t_cache[k]) for k in range(1, j + 1))
    return RecursionBundle(
        j=j,
        z=z_j,
        v=_as_two_scale(v_cache[j], like),
        t=_as_two_scale(t_cache[j], like),
        r=_as_two_scale(r_j, like),
        s=_as_two_scale(s_j, like),
    )


def forcing_F1(ctx: ProjectionContext, a: MaterialCoefficient, alpha: float,
               fast_grid: PeriodicGrid | None = None,
               cross_check_tol: float = 1e-11) -> TwoScaleField3:
    """First-corrector forcing in closed form, checked against the recursion.

    Closed form: -m0 x [dx m0 + alpha m0 x dx m0] * da/dy, which is
    orthogonal to m0 and has zero cell average.  The generic path evaluates
    -m0 x Z0 - alpha m0 x m0 x Z0 through the split operators; disagreement
    beyond ``cross_check_tol`` raises ConsistencyError.
    """
    fast_grid = fast_grid or a.grid
    da = deriv_values(a.values, 1, axis=-1)
    m0 = ctx.m0_slice.values
    dxm0 = ctx.dx_m0
    bracket = dxm0 + alpha * cross3(m0, dxm0)
    slow_part = -cross3(m0, bracket)  # (3, n_x)
    closed = slow_part[:, :, None] * da[None, None, :]

    m0_ts = np.repeat(ctx.m0_b, fast_grid.n_points, axis=2)
    z0 = _l1_raw(m0_ts, a.values)
    m0_b = ctx.m0_b
    generic = -cross3(m0_b, z0) - alpha * cross3(m0_b, cross3(m0_b, z0))
    gap = float(np.abs(closed - generic).max())
    if gap > cross_check_tol:
        raise ConsistencyError(
            f"first-corrector forcing paths disagree: sup diff {gap:.3e}"
        )
    return TwoScaleField3(ctx.slow_grid, fast_grid, closed)


def forcing_Fj(bundle_prev: RecursionBundle, ctx: ProjectionContext, j: int,
               alpha: float, dt_m_prev: TwoScaleField3 | None = None) -> TwoScaleField3:
    """Forcing at index j from the bundle at index j-1.

    F_j = -R_{j-1} - m0 x Z_{j-1}
          - alpha (m0 x R_{j-1} + m0 x m0 x Z_{j-1} + S_{j-1})
          - dt m_{j-2}.

    ``dt_m_prev`` is the slow-time derivative of m_{j-2}: None (zero) for
    j = 1; for j = 2 the caller must pass the homogenized right-hand side
    applied to m0, never a finite difference.
    """
    if bundle_prev.j != j - 1:
        raise ParameterError(f"forcing at j={j} needs the bundle at index {j - 1}")
    if j == 2 and dt_m_prev is None:
        raise ParameterError("forcing at j=2 requires the analytic dt of m0")
    m0_b = ctx.m0_b
    z = bundle_prev.z.values
    r = bundle_prev.r.values
    s = bundle_prev.s.values
    out = -r - cross3(m0_b, z) - alpha * (
        cross3(m0_b, r) + cross3(m0_b, cross3(m0_b, z)) + s
    )
    if dt_m_prev is not None:
        out = out - dt_m_prev.values
    return _as_two_scale(out, bundle_prev.z)


def forcing_F2_hand(ctx: ProjectionContext, a: MaterialCoefficient, alpha: float,
                    m1: TwoScaleField3, v: TwoScaleField3,
                    dt_m0: TwoScaleField3) -> TwoScaleField3:
    """Second-corrector forcing via the hand-written simplification.

    Uses R_1 = m1 x L2 v and S_1 = m1 x (m0 x L2 v), which relies on the
    cell identity collapsing V_1 to L2 v.  Kept as an independent path for
    cross-checking the generic recursion.
    """
    m0_b = ctx.m0_b
    l2v = _l2_raw(v.values, a.values)
    r1 = cross3(m1.values, l2v)
    s1 = cross3(m1.values, cross3(m0_b, l2v))
    m0_ts = np.repeat(m0_b, m1.fast_grid.n_points, axis=2)
    z1 = _l0_raw(m0_ts, a.values) + _l1_raw(m1.values, a.values)
    out = -r1 - cross3(m0_b, z1) - alpha * (
        cross3(m0_b, r1) + cross3(m0_b, cross3(m0_b, z1)) + s1
    ) - dt_m0.values
    return _as_two_scale(out, m1)


def dt_m0_field(ctx: ProjectionContext, a_h: float, alpha: float,
                fast_grid: PeriodicGrid) -> TwoScaleField3:
    """Slow-time derivative of m0 from the homogenized right-hand side."""
    hom = LLOperatorContext(a_h, alpha, ctx.slow_grid)
    rhs = hom.rhs_raw(ctx.m0_slice.values)
    vals = np.repeat(rhs[:, :, None], fast_grid.n_points, axis=2)
    return TwoScaleField3(ctx.slow_grid, fast_grid, vals)


# --- corrector states ---------------------------------------------------------


@dataclass(frozen=True)
class CorrectorState:
    """One corrector field at a fixed (slow time, fast time)."""

    j: int
    field: TwoScaleField3
    tau: float
    t_slow: float = 0.0

    def __post_init__(self) -> None:
        if self.j < 1:
            raise ParameterError("corrector index starts at 1")
        if self.tau < 0:
            raise ParameterError("fast time must be >= 0")


def m1_defects(m1_values: np.ndarray, ctx: ProjectionContext) -> tuple[float, float]:
    """(orthogonality, zero-mean) defects of a first-corrector array."""
    ortho = float(np.abs(dot3(ctx.m0_b, m1_values)).max())
    mean = float(np.abs(m1_values.mean(axis=2)).max())
    return ortho, mean


# --- fast-time evolution --------------------------------------------------------


def stable_dtau(fast_grid: PeriodicGrid, a_max: float, safety: float = 0.2) -> float:
    return safety * fast_grid.spacing**2 / a_max


def _normalize_outputs(tau_end: float, output_taus) -> list[float]:
    if output_taus is None:
        outs = [tau_end]
    else:
        outs = sorted(float(t) for t in output_taus)
        if outs and (outs[0] < 0 or outs[-1] > tau_end + 1e-12):
            raise ParameterError("output taus must lie in [0, tau_end]")
        if not outs or abs(outs[-1] - tau_end) > 1e-12:
            outs.append(tau_end)
    return outs


def _rk4_linear(field: np.ndarray, rhs, tau: float, dtau: float) -> np.ndarray:
    k1 = rhs(tau, field)
    k2 = rhs(tau + 0.5 * dtau, field + 0.5 * dtau * k1)
    k3 = rhs(tau + 0.5 * dtau, field + 0.5 * dtau * k2)
    k4 = rhs(tau + dtau, field + dtau * k3)
    return field + (dtau / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _march(field: np.ndarray, rhs, tau0: float, tau1: float, dtau: float,
           what: str) -> np.ndarray:
    span = tau1 - tau0
    if span <= 1e-15:
        return field
    n = max(1, int(np.ceil(span / dtau - 1e-12)))
    dt = span / n
    for i in range(n):
        field = _rk4_linear(field, rhs, tau0 + i * dt, dt)
    if np.isnan(field).any():
        raise NumericalError(f"{what} evolution produced non-finite values by tau={tau1:.3g}")
    return field


def solve_v(ctx: ProjectionContext, cell: CellSolution, a: MaterialCoefficient,
            alpha: float, tau_end: float, dtau: float | None = None,
            output_taus=None) -> list[tuple[float, TwoScaleField3]]:
    """Evolve the decaying part of the first corrector.

    Initial data is -dx m0 (x) chi(y); the equation is the homogeneous
    fast-scale flow, so the field stays orthogonal to m0 and mean-free and
    decays exponentially.
    """
    if cell.grid.n_points != a.grid.n_points:
        raise GridMismatchError("cell solution and coefficient grids differ")
    if tau_end <= 0:
        raise ParameterError("tau_end must be positive")
    dtau = dtau or stable_dtau(a.grid, a.a_max)
    outs = _normalize_outputs(tau_end, output_taus)
    m0_b = ctx.m0_b
    av = a.values
    field = -ctx.dx_m0[:, :, None] * cell.chi.values[None, None, :]

    def rhs(_tau, u):
        return _script_l_from_l2(_l2_raw(u, av), m0_b, alpha)

    results = []
    tau = 0.0
    for target in outs:
        field = _march(field, rhs, tau, target, dtau, "fast-time")
        tau = target
        results.append((tau, TwoScaleField3(ctx.slow_grid, a.grid, field)))
    return results


def solve_m1(ctx: ProjectionContext, cell: CellSolution, a: MaterialCoefficient,
             alpha: float, tau_end: float, dtau: float | None = None,
             output_taus=None, check: bool = True,
             check_tol: float = CORRECTOR_TOL) -> list[CorrectorState]:
    """First corrector via the ansatz m1 = dx m0 chi + v, with m1(0) = 0.

    With ``check`` enabled a direct integration of the first-corrector
    equation (through V_1 = L2 m1 + L1 m0) is run alongside and compared at
    every output, raising ConsistencyError beyond ``check_tol``.
    """
    dtau = dtau or stable_dtau(a.grid, a.a_max)
    v_out = solve_v(ctx, cell, a, alpha, tau_end, dtau, output_taus)
    chi_part = ctx.dx_m0[:, :, None] * cell.chi.values[None, None, :]
    states = [
        CorrectorState(j=1, field=TwoScaleField3(ctx.slow_grid, a.grid,
                                                 chi_part + v.values), tau=tau)
        for tau, v in v_out
    ]
    if check:
        direct = solve_m1_direct(ctx, a, alpha, tau_end, dtau,
                                 output_taus=[tau for tau, _ in v_out])
        for got, ref in zip(states, direct):
            gap = float(np.abs(got.field.values - ref.field.values).max())
            if gap > check_tol:
                raise ConsistencyError(
                    f"first-corrector paths disagree at tau={got.tau:g}: {gap:.3e}"
                )
    return states


def solve_m1_direct(ctx: ProjectionContext, a: MaterialCoefficient, alpha: float,
                    tau_end: float, dtau: float | None = None,
                    output_taus=None) -> list[CorrectorState]:
    """First corrector by integrating its own equation from zero data."""
    dtau = dtau or stable_dtau(a.grid, a.a_max)
    outs = _normalize_outputs(tau_end, output_taus)
    m0_b = ctx.m0_b
    av = a.values
    m0_ts = np.repeat(m0_b, a.grid.n_points, axis=2)
    z0 = _l1_raw(m0_ts, av)

    def rhs(_tau, u):
        v1 = _l2_raw(u, av) + z0
        mx = cross3(m0_b, v1)
        return -mx - alpha * cross3(m0_b, mx)

    field = np.zeros((3, ctx.slow_grid.n_points, a.grid.n_points))
    results = []
    tau = 0.0
    for target in outs:
        field = _march(field, rhs, tau, target, dtau, "first corrector")
        tau = target
        results.append(CorrectorState(j=1, field=TwoScaleField3(ctx.slow_grid, a.grid, field), tau=tau))
    return results


def solve_mj(j: int, forcing, ctx: ProjectionContext, a: MaterialCoefficient,
             alpha: float, tau_end: float, dtau: float | None = None,
             output_taus=None) -> list[CorrectorState]:
    """Generic corrector solve with forcing re-evaluated at every stage.

    ``forcing`` is a callable tau -> (3, n_x, n_y) array (or a constant
    array); zero initial data.  For j >= 2 the caller owns the consistency
    of the supplied forcing with the lower correctors; the coupled driver
    in `evolve_hierarchy` does this internally.
    """
    if j < 1:
        raise ParameterError("corrector index starts at 1")
    dtau = dtau or stable_dtau(a.grid, a.a_max)
    outs = _normalize_outputs(tau_end, output_taus)
    m0_b = ctx.m0_b
    av = a.values
    if isinstance(forcing, np.ndarray):
        const = forcing

        def forcing(_tau):  # noqa: F811 - constant source
            return const

    def rhs(tau, u):
        return _script_l_from_l2(_l2_raw(u, av), m0_b, alpha) + forcing(tau)

    field = np.zeros((3, ctx.slow_grid.n_points, a.grid.n_points))
    results = []
    tau = 0.0
    for target in outs:
        field = _march(field, rhs, tau, target, dtau, f"corrector {j}")
        tau = target
        results.append(CorrectorState(j=j, field=TwoScaleField3(ctx.slow_grid, a.grid, field), tau=tau))
    return results


@dataclass(frozen=True)
class _HierarchyPack:
    """Per-slice precomputed quantities for the coupled corrector system."""

    m0_b: np.ndarray
    a_values: np.ndarray
    alpha: float
    f1: np.ndarray
    z0: np.ndarray
    l0_m0: np.ndarray
    dt_m0: np.ndarray


def _build_pack(ctx: ProjectionContext, a: MaterialCoefficient, alpha: float,
                a_h: float) -> _HierarchyPack:
    av = a.values
    m0_b = ctx.m0_b
    m0_ts = np.repeat(m0_b, a.grid.n_points, axis=2)
    z0 = _l1_raw(m0_ts, av)
    f1 = -cross3(m0_b, z0) - alpha * cross3(m0_b, cross3(m0_b, z0))
    l0_m0 = _l0_raw(m0_ts, av)
    hom = LLOperatorContext(a_h, alpha, ctx.slow_grid)
    dt_m0 = np.repeat(hom.rhs_raw(ctx.m0_slice.values)[:, :, None], a.grid.n_points, axis=2)
    return _HierarchyPack(m0_b=m0_b, a_values=av, alpha=alpha, f1=f1, z0=z0,
                          l0_m0=l0_m0, dt_m0=dt_m0)


def _hierarchy_rhs(fields: list[np.ndarray], pack: _HierarchyPack) -> list[np.ndarray]:
    """Stage-consistent right-hand sides for [m1] or [m1, m2]."""
    m0_b, av, alpha = pack.m0_b, pack.a_values, pack.alpha
    m1 = fields[0]
    l2m1 = _l2_raw(m1, av)
    out1 = _script_l_from_l2(l2m1, m0_b, alpha) + pack.f1
    if len(fields) == 1:
        return [out1]
    m2 = fields[1]
    v1 = l2m1 + pack.z0
    z1 = pack.l0_m0 + _l1_raw(m1, av)
    r1 = cross3(m1, v1)
    s1 = cross3(m1, cross3(m0_b, v1))
    f2 = -r1 - cross3(m0_b, z1) - alpha * (
        cross3(m0_b, r1) + cross3(m0_b, cross3(m0_b, z1)) + s1
    ) - pack.dt_m0
    out2 = _script_l_from_l2(_l2_raw(m2, av), m0_b, alpha) + f2
    return [out1, out2]


def evolve_hierarchy(ctx: ProjectionContext, a: MaterialCoefficient, a_h: float,
                     alpha: float, j_max: int, tau_end: float,
                     dtau: float | None = None, output_taus=None
                     ) -> dict[float, dict[int, TwoScaleField3]]:
    """Co-evolve correctors 1..j_max in fast time with m0 frozen.

    Returns a mapping tau -> {j: field}.  Supported depth is j_max <= 2;
    beyond that the forcing needs slow-time derivatives of evolving
    correctors, which the frozen-slice setting cannot supply.
    """
    if j_max not in (1, 2):
        raise ParameterError("coupled evolution is validated for j_max in {1, 2}")
    dtau = dtau or stable_dtau(a.grid, a.a_max)
    outs = _normalize_outputs(tau_end, output_taus)
    pack = _build_pack(ctx, a, alpha, a_h)
    shape = (3, ctx.slow_grid.n_points, a.grid.n_points)
    fields = [np.zeros(shape) for _ in range(j_max)]

    def step(flds, dt):
        k1 = _hierarchy_rhs(flds, pack)
        k2 = _hierarchy_rhs([f + 0.5 * dt * k for f, k in zip(flds, k1)], pack)
        k3 = _hierarchy_rhs([f + 0.5 * dt * k for f, k in zip(flds, k2)], pack)
        k4 = _hierarchy_rhs([f + dt * k for f, k in zip(flds, k3)], pack)
        return [f + (dt / 6.0) * (a1 + 2 * a2 + 2 * a3 + a4)
                for f, a1, a2, a3, a4 in zip(flds, k1, k2, k3, k4)]

    results: dict[float, dict[int, TwoScaleField3]] = {}
    tau = 0.0
    for target in outs:
        span = target - tau
        if span > 1e-15:
            n = max(1, int(np.ceil(span / dtau - 1e-12)))
            dt = span / n
            for _ in range(n):
                fields = step(fields, dt)
            if any(np.isnan(f).any() for f in fields):
                raise NumericalError(f"corrector hierarchy unstable by tau={target:.3g}")
        tau = target
        results[tau] = {
            j + 1: TwoScaleField3(ctx.slow_grid, a.grid, fields[j])
            for j in range(j_max)
        }
    return results


# --- assembly and the physical-diagonal driver ---------------------------------


def assemble_m_tilde(m0_state: VectorField3, correctors: dict[int, TwoScaleField3],
                     eps: float, fine_grid: PeriodicGrid) -> VectorField3:
    """Corrected approximation m0 + sum_j eps^j m_j(x, x/eps) on the fine grid."""
    base = refine_field(m0_state, fine_grid)
    total = np.array(base.values)
    for j, field in sorted(correctors.items()):
        diag = evaluate_diagonal(field, eps, fine_grid)
        total += eps**j * diag.values
    return VectorField3(fine_grid, total)


def assemble_from_trajectory(m0_traj, correctors: dict[int, TwoScaleField3],
                             eps: float, t: float, fine_grid: PeriodicGrid) -> VectorField3:
    """Assembly helper selecting the homogenized state at recorded time t."""
    return assemble_m_tilde(m0_traj.state_at(t), correctors, eps, fine_grid)


@dataclass
class CorrectedRun:
    """Output of the coupled slow/fast driver along tau = t / eps^2."""

    eps: float
    J: int
    times: list[float]
    m_tilde: list[VectorField3]
    m0_states: list[VectorField3]
    history: list[tuple]
    refresh_count: int


def corrected_trajectory(*, cell: CellSolution, a: MaterialCoefficient,
                         m_init_spec, eps: float, J: int, alpha: float,
                         output_times, slow_grid: PeriodicGrid,
                         fine_grid: PeriodicGrid, dtau: float | None = None,
                         tau_refresh: float = TAU_REFRESH_DEFAULT,
                         dt_slow: float | None = None,
                         refresh_until: float | None = None) -> CorrectedRun:
    """Corrected approximation along the physical diagonal tau = t / eps^2.

    The homogenized base evolves on the slow grid; the correctors evolve in
    fast time with the frozen slice refreshed every ``tau_refresh`` fast-time
    units (the base drifts only O(eps^2) per unit tau, so the refresh error
    is of higher order than the last retained corrector).  Refreshing changes
    the corrector flow, never the state, so the assembled field is continuous
    with derivative kinks at the checkpoints; callers that difference the
    output in time can cap checkpoints with ``refresh_until`` to keep their
    stencil window kink-free.
    """
    if J not in (0, 1, 2):
        raise ParameterError("corrected expansion is supported for J in {0, 1, 2}")
    output_times = sorted(float(t) for t in output_times)
    if output_times[0] < 0:
        raise ParameterError("output times must be >= 0")
    t_end = output_times[-1]

    hom_ctx = LLOperatorContext(cell.a_h, alpha, slow_grid, description="homogenized")
    m0_vals = build_initial_data(m_init_spec, slow_grid).values
    dt_slow = dt_slow or stable_dt(hom_ctx)
    dtau = dtau or stable_dtau(a.grid, a.a_max)

    # interval boundaries: outputs plus fast-time refresh checkpoints
    checkpoints = set()
    if J >= 1:
        cap = t_end if refresh_until is None else min(refresh_until, t_end)
        n_chk = int(np.floor(cap / (eps**2 * tau_refresh) + 1e-12))
        checkpoints = {eps**2 * tau_refresh * k for k in range(1, n_chk + 1)}
    bounds = sorted(set(output_times) | {0.0} | checkpoints)

    fields = [np.zeros((3, slow_grid.n_points, a.grid.n_points)) for _ in range(J)]
    pack = None
    if J >= 1:
        ctx = ProjectionContext(VectorField3(slow_grid, m0_vals, unit_constrained=True))
        pack = _build_pack(ctx, a, alpha, cell.a_h)

    def record_output(t):
        m0_state = VectorField3(slow_grid, m0_vals, unit_constrained=True)
        corr = {j + 1: TwoScaleField3(slow_grid, a.grid, fields[j]) for j in range(J)}
        times.append(t)
        m0_states.append(m0_state)
        m_tilde.append(assemble_m_tilde(m0_state, corr, eps, fine_grid))

    def record_history(t):
        if J == 0:
            return
        tau = t / eps**2
        chi_part = (
            deriv_values(m0_vals, 1, axis=-1)[:, :, None] * cell.chi.values[None, None, :]
        )
        v_vals = fields[0] - chi_part
        ortho, mean = m1_defects(fields[0], ProjectionContext(
            VectorField3(slow_grid, m0_vals, unit_constrained=True)))
        def l2(arr):
            return float(np.sqrt((arr**2).sum(axis=0).mean()))
        history.append((tau, l2(v_vals), l2(fields[0]),
                        l2(fields[1]) if J >= 2 else 0.0, ortho, mean))

    times, m0_states, m_tilde, history = [], [], [], []
    out_set = set(output_times)
    if 0.0 in out_set:
        record_output(0.0)
    record_history(0.0)

    refresh_count = 0
    t_cur = 0.0
    for t_next in bounds:
        if t_next <= t_cur:
            continue
        span = t_next - t_cur
        if J >= 1:
            tau0, tau1 = t_cur / eps**2, t_next / eps**2
            n = max(1, int(np.ceil((tau1 - tau0) / dtau - 1e-12)))
            dt = (tau1 - tau0) / n
            for _ in range(n):
                k1 = _hierarchy_rhs(fields, pack)
                k2 = _hierarchy_rhs([f + 0.5 * dt * k for f, k in zip(fields, k1)], pack)
                k3 = _hierarchy_rhs([f + 0.5 * dt * k for f, k in zip(fields, k2)], pack)
                k4 = _hierarchy_rhs([f + dt * k for f, k in zip(fields, k3)], pack)
                fields = [f + (dt / 6.0) * (a1 + 2 * a2 + 2 * a3 + a4)
                          for f, a1, a2, a3, a4 in zip(fields, k1, k2, k3, k4)]
            if any(np.isnan(f).any() for f in fields):
                raise NumericalError(f"corrector evolution unstable by t={t_next:.3g}")
        m0_vals, _ = advance(m0_vals, hom_ctx, span, dt_slow)
        t_cur = t_next
        if J >= 1 and t_cur in checkpoints:
            ctx = ProjectionContext(VectorField3(slow_grid, m0_vals, unit_constrained=True))
            pack = _build_pack(ctx, a, alpha, cell.a_h)
            refresh_count += 1
        if t_cur in out_set:
            record_output(t_cur)
        record_history(t_cur)

    return CorrectedRun(eps=eps, J=J, times=times, m_tilde=m_tilde,
                        m0_states=m0_states, history=history,
                        refresh_count=refresh_count)


def corrector_history_rows(run: CorrectedRun):
    """CSV rows (tau, norm_v_L2, norm_m1_L2, norm_m2_L2, ortho_defect, mean_defect)."""
    return list(run.history)
