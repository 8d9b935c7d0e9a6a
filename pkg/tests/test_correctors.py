"""Split operators, projections, recursion quantities, and corrector evolution."""

import numpy as np
import pytest

from conftest import random_two_scale
from llhomog.correctors import (
    CorrectorState,
    ProjectionContext,
    assemble_m_tilde,
    averaging_A,
    corrected_trajectory,
    dt_m0_field,
    evolve_hierarchy,
    forcing_F1,
    forcing_F2_hand,
    forcing_Fj,
    m0_as_two_scale,
    m1_defects,
    op_L0,
    op_L1,
    op_L2,
    proj_P,
    proj_Q,
    projection_M,
    recursion_quantities,
    script_L,
    solve_m1,
    solve_mj,
    solve_v,
    stable_dtau,
)
from llhomog.errors import ParameterError
from llhomog.grid import (
    PeriodicGrid,
    TwoScaleField3,
    VectorField3,
    deriv_values,
    evaluate_diagonal,
    refine_field,
)
from llhomog.llg import LLOperatorContext, apply_exchange, build_initial_data, dot3
from llhomog.material import (
    CoefficientSpec,
    MaterialCoefficient,
    build_coefficient,
    sample_eps_coefficient,
    solve_cell_problem,
)
from llhomog.norms import norm_hqp


def ts_l2(values):
    return float(np.sqrt((values**2).sum(axis=0).mean()))


class TestSplitOperators:
    def test_y_independent_field(self, ctx64, material32):
        # for u(x): L1 u = dx u * da/dy and L2 u = 0
        u = m0_as_two_scale(ctx64, material32.grid)
        da = deriv_values(material32.values, 1, axis=-1)
        dxu = deriv_values(ctx64.m0_slice.values, 1, axis=-1)
        expected = dxu[:, :, None] * da[None, None, :]
        got = op_L1(u, material32)
        assert np.abs(got.values - expected).max() < 1e-9
        assert np.abs(op_L2(u, material32).values).max() < 1e-9

    def test_constant_coefficient_l1_is_mixed_derivative(self):
        rng = np.random.default_rng(40)
        slow, fast = PeriodicGrid(32), PeriodicGrid(16)
        a = build_coefficient(CoefficientSpec("constant", 1.7), fast)
        u = random_two_scale(rng, slow, fast)
        got = op_L1(u, a)
        mixed = deriv_values(deriv_values(u.values, 1, axis=1), 1, axis=2)
        assert np.abs(got.values - 2 * 1.7 * mixed).max() < 1e-10 * max(
            1.0, np.abs(mixed).max()
        )

    def test_l0_is_scaled_xx_derivative(self, material32):
        rng = np.random.default_rng(41)
        slow = PeriodicGrid(32)
        u = random_two_scale(rng, slow, material32.grid)
        got = op_L0(u, material32)
        expected = material32.values[None, None, :] * deriv_values(u.values, 2, axis=1)
        assert np.abs(got.values - expected).max() < 1e-12 * np.abs(expected).max()

    def test_split_operator_diagonal_consistency(self):
        # (L0 + eps^-1 L1 + eps^-2 L2) u on the diagonal equals the fine
        # exchange operator applied to the diagonal evaluation
        rng = np.random.default_rng(42)
        eps = 1.0 / 16.0
        slow, fast, fine = PeriodicGrid(32), PeriodicGrid(16), PeriodicGrid(512)
        a = build_coefficient(CoefficientSpec("sinusoidal", 0.5), fast)
        u = random_two_scale(rng, slow, fast, kx=3, ky=3)
        combo = TwoScaleField3(
            slow, fast,
            op_L0(u, a).values + op_L1(u, a).values / eps + op_L2(u, a).values / eps**2,
        )
        lhs = evaluate_diagonal(combo, eps, fine).values
        a_eps = sample_eps_coefficient(a, eps, fine)
        ctx = LLOperatorContext(a_eps, 0.5, fine)
        rhs = ctx.exchange_raw(evaluate_diagonal(u, eps, fine).values)
        assert np.abs(lhs - rhs).max() < 1e-9 * np.abs(rhs).max()


class TestScriptL:
    def test_y_independent_gives_zero(self, ctx32, material32):
        w = m0_as_two_scale(ctx32, material32.grid)
        out = script_L(w, ctx32, material32, alpha=0.3)
        assert np.abs(out.values).max() < 1e-9

    def test_orthogonal_to_m0(self, ctx32, material32):
        rng = np.random.default_rng(43)
        w = random_two_scale(rng, ctx32.slow_grid, material32.grid)
        out = script_L(w, ctx32, material32, alpha=0.7)
        defect = np.abs(dot3(ctx32.m0_b, out.values)).max()
        assert defect < 1e-12 * max(1.0, np.abs(out.values).max())

    def test_hand_expanded_oracle_alpha_zero(self):
        # m0 = (1,0,0), w = (0,0, phi(x) sin(2 pi y)): the operator reduces to
        # (0, phi(x) d/dy[a 2 pi cos(2 pi y)], 0); for a = 1 + 0.5 sin(2 pi y)
        # the bracket derivative is -4 pi^2 sin(2 pi y) + 2 pi^2 cos(4 pi y)
        slow = PeriodicGrid(16)
        a = build_coefficient(CoefficientSpec("sinusoidal", 0.5), PeriodicGrid(32))
        fast = a.grid
        m0 = VectorField3(slow, np.repeat([[1.0], [0.0], [0.0]], 16, axis=1),
                          unit_constrained=True)
        ctx = ProjectionContext(m0)
        x, y = slow.nodes[:, None], fast.nodes[None, :]
        phi = 1.0 + 0.5 * np.cos(2 * np.pi * x)
        vals = np.zeros((3, 16, fast.n_points))
        vals[2] = phi * np.sin(2 * np.pi * y)
        w = TwoScaleField3(slow, fast, vals)
        out = script_L(w, ctx, a, alpha=0.0)
        expected = phi * (-4 * np.pi**2 * np.sin(2 * np.pi * y)
                          + 2 * np.pi**2 * np.cos(4 * np.pi * y))
        assert np.abs(out.values[1] - expected).max() < 1e-10 * np.abs(expected).max()
        assert np.abs(out.values[0]).max() < 1e-10
        assert np.abs(out.values[2]).max() < 1e-10


class TestProjections:
    def test_averaging_is_cell_mean(self, ctx32, material16):
        rng = np.random.default_rng(44)
        u = random_two_scale(rng, ctx32.slow_grid, material16.grid)
        avg = averaging_A(u)
        assert np.allclose(avg.values, u.values.mean(axis=2))

    def test_projection_m_idempotent(self, ctx32, material16):
        rng = np.random.default_rng(45)
        u = random_two_scale(rng, ctx32.slow_grid, material16.grid)
        once = projection_M(u, ctx32)
        twice = projection_M(once, ctx32)
        assert np.abs(once.values - twice.values).max() < 1e-13

    def test_p_plus_q_is_identity(self, ctx32, material16):
        rng = np.random.default_rng(46)
        for _ in range(10):
            u = random_two_scale(rng, ctx32.slow_grid, material16.grid)
            total = proj_P(u, ctx32).values + proj_Q(u, ctx32).values
            assert np.abs(total - u.values).max() < 1e-13

    def test_p_and_q_idempotent(self, ctx32, material16):
        rng = np.random.default_rng(47)
        u = random_two_scale(rng, ctx32.slow_grid, material16.grid)
        p = proj_P(u, ctx32)
        q = proj_Q(u, ctx32)
        assert np.abs(proj_P(p, ctx32).values - p.values).max() < 1e-12
        assert np.abs(proj_Q(q, ctx32).values - q.values).max() < 1e-12
        # and they annihilate each other
        assert np.abs(proj_P(q, ctx32).values).max() < 1e-12
        assert np.abs(proj_Q(p, ctx32).values).max() < 1e-12

    def test_p_commutes_with_dy(self, ctx32, material16):
        rng = np.random.default_rng(48)
        u = random_two_scale(rng, ctx32.slow_grid, material16.grid)
        from llhomog.grid import ts_dy

        lhs = ts_dy(proj_P(u, ctx32)).values
        rhs = proj_P(ts_dy(u), ctx32).values
        assert np.abs(lhs - rhs).max() < 1e-11 * max(1.0, np.abs(rhs).max())

    def test_q_annihilates_script_l(self, ctx32, material16):
        rng = np.random.default_rng(49)
        w = random_two_scale(rng, ctx32.slow_grid, material16.grid)
        lw = script_L(w, ctx32, material16, alpha=0.4)
        assert np.abs(proj_Q(lw, ctx32).values).max() < 1e-10 * max(
            1.0, np.abs(lw.values).max()
        )

    def test_p_script_l_identities(self, ctx32, material16):
        rng = np.random.default_rng(50)
        w = random_two_scale(rng, ctx32.slow_grid, material16.grid)
        lw = script_L(w, ctx32, material16, alpha=0.4)
        scale = max(1.0, np.abs(lw.values).max())
        # P (L w) = L w
        assert np.abs(proj_P(lw, ctx32).values - lw.values).max() < 1e-10 * scale
        # L (P w) = L w
        lpw = script_L(proj_P(w, ctx32), ctx32, material16, alpha=0.4)
        assert np.abs(lpw.values - lw.values).max() < 1e-10 * scale


class TestForcingF1:
    def test_constant_m0_gives_zero(self, material32):
        slow = PeriodicGrid(16)
        m0 = VectorField3(slow, np.repeat([[0.0], [0.0], [1.0]], 16, axis=1),
                          unit_constrained=True)
        f1 = forcing_F1(ProjectionContext(m0), material32, alpha=0.3)
        assert np.abs(f1.values).max() < 1e-12

    def test_constant_coefficient_gives_zero(self, ctx32):
        a = build_coefficient(CoefficientSpec("constant", 2.0), PeriodicGrid(16))
        f1 = forcing_F1(ctx32, a, alpha=0.3)
        assert np.abs(f1.values).max() < 1e-12

    def test_orthogonality_and_zero_mean(self, ctx64, material32):
        f1 = forcing_F1(ctx64, material32, alpha=0.02)
        assert np.abs(dot3(ctx64.m0_b, f1.values)).max() < 1e-11
        assert np.abs(f1.values.mean(axis=2)).max() < 1e-11
        # consequently Q F1 vanishes
        assert np.abs(proj_Q(f1, ctx64).values).max() < 1e-11


@pytest.fixture(scope="module")
def v_run32(material32, cell32):
    """Shared v evolution: fig1-style slice, alpha = 0.2, tau up to 2."""
    ctx = ProjectionContext(build_initial_data("fig1", PeriodicGrid(32)))
    taus = [0.0, 0.5, 1.0, 1.5, 2.0]
    out = solve_v(ctx, cell32, material32, alpha=0.2, tau_end=2.0, output_taus=taus)
    return ctx, material32, cell32, out


class TestSolveV:
    def test_zero_gradient_stays_zero(self, material16_soft, cell16_soft):
        slow = PeriodicGrid(16)
        m0 = VectorField3(slow, np.repeat([[0.0], [1.0], [0.0]], 16, axis=1),
                          unit_constrained=True)
        out = solve_v(ProjectionContext(m0), cell16_soft, material16_soft, alpha=0.5, tau_end=0.5)
        assert np.abs(out[-1][1].values).max() < 1e-14

    def test_initial_data(self, v_run32):
        ctx, a, cell, out = v_run32
        tau0, v0 = out[0]
        assert tau0 == 0.0
        expected = -ctx.dx_m0[:, :, None] * cell.chi.values[None, None, :]
        assert np.abs(v0.values - expected).max() < 1e-14

    def test_orthogonality_preserved(self, v_run32):
        ctx, a, cell, out = v_run32
        for _tau, v in out:
            assert np.abs(dot3(ctx.m0_b, v.values)).max() < 1e-9

    def test_stays_in_p_range(self, v_run32):
        ctx, a, cell, out = v_run32
        for _tau, v in out:
            assert np.abs(proj_Q(v, ctx).values).max() < 1e-9

    def test_exponential_decay_floor(self, v_run32):
        # one-sided: measured decay at least alpha a_min (2 pi)^2
        ctx, a, cell, out = v_run32
        gamma = 0.2 * a.a_min * 4 * np.pi**2
        n0 = norm_hqp(out[0][1], 0, 0)
        for tau, v in out[1:]:
            assert norm_hqp(v, 0, 0) <= n0 * np.exp(-gamma * tau) * (1 + 1e-6)


class TestSolveM1:
    def test_zero_at_tau_zero(self, v_run32):
        ctx, a, cell, _ = v_run32
        states = solve_m1(ctx, cell, a, alpha=0.2, tau_end=0.5, output_taus=[0.0, 0.5])
        assert states[0].tau == 0.0
        assert np.abs(states[0].field.values).max() < 1e-14

    def test_relaxes_to_cell_profile(self, v_run32):
        # || m1(tau) - dx m0 chi || <= e^{-gamma tau} ||v(0)||
        ctx, a, cell, out = v_run32
        states = solve_m1(ctx, cell, a, alpha=0.2, tau_end=2.0, check=False)
        chi_part = ctx.dx_m0[:, :, None] * cell.chi.values[None, None, :]
        gap = ts_l2(states[-1].field.values - chi_part)
        v0 = ts_l2(out[0][1].values)
        gamma = 0.2 * a.a_min * 4 * np.pi**2
        assert gap <= v0 * np.exp(-gamma * 2.0) * (1 + 1e-6)

    def test_zero_average_and_orthogonality(self, v_run32):
        ctx, a, cell, _ = v_run32
        states = solve_m1(ctx, cell, a, alpha=0.2, tau_end=1.0,
                          output_taus=[0.25, 0.5, 1.0], check=False)
        for st in states:
            ortho, mean = m1_defects(st.field.values, ctx)
            assert ortho < 1e-9
            assert mean < 1e-9

    def test_dual_path_cross_check_runs(self, v_run32):
        ctx, a, cell, _ = v_run32
        # check=True integrates the direct equation alongside; must agree
        states = solve_m1(ctx, cell, a, alpha=0.2, tau_end=0.5, check=True)
        assert states[-1].tau == 0.5

    def test_generic_solver_matches_ansatz(self, v_run32):
        ctx, a, cell, _ = v_run32
        f1 = forcing_F1(ctx, a, alpha=0.2)
        generic = solve_mj(1, f1.values, ctx, a, alpha=0.2, tau_end=0.5)
        ansatz = solve_m1(ctx, cell, a, alpha=0.2, tau_end=0.5, check=False)
        gap = np.abs(generic[-1].field.values - ansatz[-1].field.values).max()
        assert gap < 1e-8


class TestRecursion:
    def test_r0_s0_zero(self, ctx32, material16):
        u = m0_as_two_scale(ctx32, material16.grid)
        bundle = recursion_quantities({0: u}, ctx32, material16, j=0)
        assert np.abs(bundle.r.values).max() == 0.0
        assert np.abs(bundle.s.values).max() == 0.0
        assert bundle.v is None and bundle.t is None

    def test_v1_collapses_to_l2_v(self, v_run32):
        # with m1 = dx m0 chi + v the cell identity kills L2(dx m0 chi) + L1 m0
        ctx, a, cell, out = v_run32
        tau, v = out[2]
        chi_part = ctx.dx_m0[:, :, None] * cell.chi.values[None, None, :]
        m1 = TwoScaleField3(ctx.slow_grid, a.grid, chi_part + v.values)
        bundle = recursion_quantities({1: m1}, ctx, a, j=1)
        l2v = op_L2(v, a)
        scale = max(1.0, np.abs(l2v.values).max())
        assert np.abs(bundle.v.values - l2v.values).max() < 1e-9 * scale

    def test_r1_s1_simplified_forms(self, v_run32):
        ctx, a, cell, out = v_run32
        tau, v = out[1]
        chi_part = ctx.dx_m0[:, :, None] * cell.chi.values[None, None, :]
        m1 = TwoScaleField3(ctx.slow_grid, a.grid, chi_part + v.values)
        bundle = recursion_quantities({1: m1}, ctx, a, j=1)
        from llhomog.llg import cross3

        l2v = op_L2(v, a).values
        r1_hand = cross3(m1.values, l2v)
        s1_hand = cross3(m1.values, cross3(ctx.m0_b, l2v))
        assert np.abs(bundle.r.values - r1_hand).max() < 1e-10 * max(1.0, np.abs(r1_hand).max())
        assert np.abs(bundle.s.values - s1_hand).max() < 1e-10 * max(1.0, np.abs(s1_hand).max())

    def test_t_decomposition_identity(self, ctx32, material16):
        # T_j = m0 x V_j + R_{j-1} structurally
        rng = np.random.default_rng(51)
        from llhomog.llg import cross3

        states = {
            1: random_two_scale(rng, ctx32.slow_grid, material16.grid),
            2: random_two_scale(rng, ctx32.slow_grid, material16.grid),
        }
        b2 = recursion_quantities(states, ctx32, material16, j=2)
        b1 = recursion_quantities(states, ctx32, material16, j=1)
        expected = cross3(ctx32.m0_b, b2.v.values) + b1.r.values
        assert np.abs(b2.t.values - expected).max() < 1e-11 * max(1.0, np.abs(expected).max())

    def test_no_forward_dependence(self, ctx32, material16):
        rng = np.random.default_rng(52)
        states = {
            1: random_two_scale(rng, ctx32.slow_grid, material16.grid),
            2: random_two_scale(rng, ctx32.slow_grid, material16.grid),
        }
        b1 = recursion_quantities(states, ctx32, material16, j=1)
        perturbed = dict(states)
        perturbed[2] = random_two_scale(rng, ctx32.slow_grid, material16.grid)
        b1p = recursion_quantities(perturbed, ctx32, material16, j=1)
        for name in ("z", "v", "t", "r", "s"):
            assert np.array_equal(getattr(b1, name).values, getattr(b1p, name).values)

    def test_missing_state_rejected(self, ctx32, material16):
        rng = np.random.default_rng(53)
        states = {2: random_two_scale(rng, ctx32.slow_grid, material16.grid)}
        with pytest.raises(ParameterError, match="m_1"):
            recursion_quantities(states, ctx32, material16, j=2)


class TestForcingFj:
    def test_j1_reduces_to_closed_form(self, ctx64, material32):
        u = m0_as_two_scale(ctx64, material32.grid)
        bundle = recursion_quantities({0: u}, ctx64, material32, j=0)
        generic = forcing_Fj(bundle, ctx64, j=1, alpha=0.02)
        closed = forcing_F1(ctx64, material32, alpha=0.02)
        assert np.abs(generic.values - closed.values).max() < 1e-12 * max(
            1.0, np.abs(closed.values).max()
        )

    def test_j2_constant_m0_zero(self, material16_soft, cell16_soft):
        slow = PeriodicGrid(16)
        m0 = VectorField3(slow, np.repeat([[0.0], [0.0], [1.0]], 16, axis=1),
                          unit_constrained=True)
        ctx = ProjectionContext(m0)
        zero = TwoScaleField3(slow, material16_soft.grid,
                              np.zeros((3, 16, material16_soft.grid.n_points)))
        bundle = recursion_quantities({1: zero}, ctx, material16_soft, j=1)
        dt_m0 = dt_m0_field(ctx, cell16_soft.a_h, 0.3, material16_soft.grid)
        f2 = forcing_Fj(bundle, ctx, j=2, alpha=0.3, dt_m_prev=dt_m0)
        assert np.abs(f2.values).max() < 1e-12

    def test_j2_requires_dt_m0(self, ctx32, material16):
        rng = np.random.default_rng(54)
        states = {1: random_two_scale(rng, ctx32.slow_grid, material16.grid)}
        bundle = recursion_quantities(states, ctx32, material16, j=1)
        with pytest.raises(ParameterError, match="analytic"):
            forcing_Fj(bundle, ctx32, j=2, alpha=0.3)

    def test_generic_matches_hand_form(self, v_run32):
        # acceptance-grade identity, exercised here at moderate size
        ctx, a, cell, out = v_run32
        tau, v = out[1]
        chi_part = ctx.dx_m0[:, :, None] * cell.chi.values[None, None, :]
        m1 = TwoScaleField3(ctx.slow_grid, a.grid, chi_part + v.values)
        dt_m0 = dt_m0_field(ctx, cell.a_h, 0.2, a.grid)
        bundle = recursion_quantities({1: m1}, ctx, a, j=1)
        generic = forcing_Fj(bundle, ctx, j=2, alpha=0.2, dt_m_prev=dt_m0)
        hand = forcing_F2_hand(ctx, a, 0.2, m1, v, dt_m0)
        assert np.abs(generic.values - hand.values).max() < 1e-12 * max(
            1.0, np.abs(hand.values).max()
        )

    def test_qf2_decays_in_tau(self, v_run32):
        ctx, a, cell, out = v_run32
        dt_m0 = dt_m0_field(ctx, cell.a_h, 0.2, a.grid)
        chi_part = ctx.dx_m0[:, :, None] * cell.chi.values[None, None, :]
        norms, taus = [], []
        for tau, v in out[1:]:
            m1 = TwoScaleField3(ctx.slow_grid, a.grid, chi_part + v.values)
            bundle = recursion_quantities({1: m1}, ctx, a, j=1)
            f2 = forcing_Fj(bundle, ctx, j=2, alpha=0.2, dt_m_prev=dt_m0)
            norms.append(ts_l2(proj_Q(f2, ctx).values))
            taus.append(tau)
        rate, _ = np.polyfit(taus, np.log(norms), 1)
        gamma_floor = 0.2 * a.a_min * 4 * np.pi**2
        assert -rate >= 0.8 * gamma_floor


class TestSolveMj:
    def test_zero_forcing_zero_solution(self, ctx32, material16):
        zero = np.zeros((3, 32, 16))
        out = solve_mj(2, zero, ctx32, material16, alpha=0.3, tau_end=0.5)
        assert np.abs(out[-1].field.values).max() == 0.0

    def test_m2_stays_bounded(self, material16_soft, cell16_soft):
        # no algebraic growth for the second corrector over tau in [0, 10]
        ctx = ProjectionContext(build_initial_data("fig1", PeriodicGrid(16)))
        taus = [0.5, 1, 2, 5, 7.5, 9, 10]
        states = evolve_hierarchy(ctx, material16_soft, cell16_soft.a_h, alpha=0.2,
                                  j_max=2, tau_end=10.0, output_taus=taus)
        norms = {tau: norm_hqp(states[tau][2], 0, 0) for tau in taus}
        early = max(norms[t] for t in (0.5, 1, 2, 5))
        late = max(norms[t] for t in (7.5, 9, 10))
        assert late <= 1.1 * early

    def test_hierarchy_m1_matches_standalone(self, v_run32):
        ctx, a, cell, _ = v_run32
        states = evolve_hierarchy(ctx, a, cell.a_h, alpha=0.2, j_max=2, tau_end=0.5)
        direct = solve_m1(ctx, cell, a, alpha=0.2, tau_end=0.5, check=False)
        gap = np.abs(states[0.5][1].values - direct[-1].field.values).max()
        assert gap < 1e-8


class TestCorrectorState:
    def test_index_validation(self, ctx32, material16):
        zero = TwoScaleField3(ctx32.slow_grid, material16.grid, np.zeros((3, 32, 16)))
        with pytest.raises(ParameterError):
            CorrectorState(j=0, field=zero, tau=1.0)
        with pytest.raises(ParameterError):
            CorrectorState(j=1, field=zero, tau=-1.0)


class TestAssembly:
    def test_j0_is_refined_base(self, ctx32):
        fine = PeriodicGrid(128)
        out = assemble_m_tilde(ctx32.m0_slice, {}, eps=1.0 / 8.0, fine_grid=fine)
        ref = refine_field(ctx32.m0_slice, fine)
        assert np.abs(out.values - ref.values).max() < 1e-13

    def test_tau_zero_recovers_initial_data(self, material16):
        # with m1(0) = 0 the corrected field equals the base at t = 0
        slow, fine = PeriodicGrid(32), PeriodicGrid(256)
        m0 = build_initial_data("fig1", slow)
        zero = TwoScaleField3(slow, material16.grid, np.zeros((3, 32, 16)))
        out = assemble_m_tilde(m0, {1: zero}, eps=1.0 / 16.0, fine_grid=fine)
        ref = refine_field(m0, fine)
        assert np.abs(out.values - ref.values).max() < 1e-13

    def test_time_derivative_scaling_identity(self, material16):
        # synthetic separable corrector: m_tilde = m0 + eps g(tau) H with
        # tau = t/eps^2, so d/dt m_tilde = eps^-1 g'(tau) H on the diagonal
        rng = np.random.default_rng(55)
        slow, fast, fine = PeriodicGrid(32), PeriodicGrid(16), PeriodicGrid(256)
        eps = 1.0 / 16.0
        m0 = build_initial_data("fig1", slow)
        H = random_two_scale(rng, slow, fast, kx=3, ky=3)

        def g(tau):
            return np.exp(-tau) * np.cos(5 * tau)

        def g_prime(tau):
            return -np.exp(-tau) * (np.cos(5 * tau) + 5 * np.sin(5 * tau))

        t0 = 3 * eps**2
        delta = eps**2 * 1e-3
        snaps = []
        for k in (-2, -1, 0, 1, 2):
            t = t0 + k * delta
            field = TwoScaleField3(slow, fast, g(t / eps**2) * H.values)
            snaps.append(assemble_m_tilde(m0, {1: field}, eps, fine).values)
        ddt = (-snaps[4] + 8 * snaps[3] - 8 * snaps[1] + snaps[0]) / (12 * delta)
        expected = (1.0 / eps) * g_prime(t0 / eps**2) * evaluate_diagonal(H, eps, fine).values
        assert np.abs(ddt - expected).max() < 1e-6 * max(1.0, np.abs(expected).max())


class TestCorrectedTrajectory:
    def test_j0_matches_homogenized_integration(self, material32, cell32):
        from llhomog.llg import integrate

        slow, fine = PeriodicGrid(32), PeriodicGrid(128)
        eps = 1.0 / 8.0
        t_end = eps**2
        run = corrected_trajectory(cell=cell32, a=material32, m_init_spec="fig1",
                                   eps=eps, J=0, alpha=0.3, output_times=[t_end],
                                   slow_grid=slow, fine_grid=fine)
        hom = LLOperatorContext(cell32.a_h, 0.3, slow)
        traj = integrate(build_initial_data("fig1", slow), hom, t_end,
                         output_stride=10**9)
        ref = refine_field(traj.states[-1], fine)
        assert np.abs(run.m_tilde[-1].values - ref.values).max() < 1e-9

    def test_corrected_run_structure(self, material32, cell32):
        slow, fine = PeriodicGrid(32), PeriodicGrid(128)
        eps = 1.0 / 8.0
        times = [0.0, 0.5 * eps**2, eps**2]
        run = corrected_trajectory(cell=cell32, a=material32, m_init_spec="fig1",
                                   eps=eps, J=2, alpha=0.3, output_times=times,
                                   slow_grid=slow, fine_grid=fine)
        assert run.times == times
        assert len(run.m_tilde) == 3
        # at t = 0 the corrected field is the initial data
        ref = refine_field(build_initial_data("fig1", slow), fine)
        assert np.abs(run.m_tilde[0].values - ref.values).max() < 1e-13
        # corrected field stays near unit length (deviation is O(eps^3))
        dev = np.abs(np.sqrt((run.m_tilde[-1].values ** 2).sum(axis=0)) - 1).max()
        assert dev < 5e-2
        assert run.refresh_count >= 2
        assert len(run.history) >= 3