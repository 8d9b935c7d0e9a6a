"""Experiment runners behind the CLI commands.

Every runner writes deterministic artifacts (CSV with 17 significant digits,
LF line endings, fixed column order) plus a gnuplot script that regenerates
the plots from the CSVs alone, and returns an ExperimentResult whose ``ok``
drives the process exit code.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .analysis import (
    SWEEP_CSV_HEADER,
    ErrorRecord,
    compute_error,
    fit_sweep,
    length_deviation,
    residual_eta,
    sweep_csv_rows,
)
from .config import SimConfig, echo_config
from .correctors import corrected_trajectory, corrector_history_rows
from .errors import ConfigError, LlhomogError
from .grid import PeriodicGrid, VectorField3, refine_field
from .llg import (
    LLOperatorContext,
    advance,
    build_initial_data,
    exchange_energy,
    grad_sup,
    integrate,
    stable_dt,
    trajectory_csv_rows,
    write_snapshot,
)
from .material import (
    CoefficientSpec,
    build_coefficient,
    cell_csv_rows,
    homogenized_coefficient,
    sample_eps_coefficient,
    solve_cell_problem,
)

MAX_CORRECTOR_TAU = 64.0


@dataclass
class ExperimentResult:
    ok: bool
    summary: str
    data: dict


# --- deterministic file output ----------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _write_text(path, text) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _prepare_out(cfg: SimConfig, command: str) -> str:
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    _write_text(os.path.join(out, "config_echo.txt"),
                f"# command = {command}\n" + echo_config(cfg))
    return out


# --- shared setup -------------------------------------------------------------


def next_pow2(x: float) -> int:
    n = 8
    while n < x:
        n *= 2
    return n


def fine_grid_for(cfg: SimConfig, eps: float) -> PeriodicGrid:
    if cfg.n_fine is not None:
        return PeriodicGrid(cfg.n_fine)
    return PeriodicGrid(max(next_pow2(cfg.points_per_eps / eps), cfg.n_slow))


def material_for(cfg: SimConfig):
    spec = CoefficientSpec.parse(cfg.coefficient)
    a = build_coefficient(spec, PeriodicGrid(cfg.n_fast))
    cell = solve_cell_problem(a, cell_tol=cfg.cell_tol)
    return a, cell


def init_spec(cfg: SimConfig):
    if cfg.m_init == "fig1":
        return "fig1"
    if cfg.m_init.startswith("constant:"):
        comps = tuple(float(p) for p in cfg.m_init.split(":", 1)[1].split(","))
        return ("constant", comps)
    raise ConfigError(f"unknown initial data spec '{cfg.m_init}'")


def fine_states_at(cfg: SimConfig, eps: float, times, a, fine_grid: PeriodicGrid):
    """Fine-scale states at exact times via chained integration segments."""
    a_eps = sample_eps_coefficient(a, eps, fine_grid)
    ctx = LLOperatorContext(a_eps, cfg.alpha, fine_grid,
                            description=f"fine eps={eps:g}")
    values = build_initial_data(init_spec(cfg), fine_grid).values
    dt = cfg.dt if cfg.dt is not None else stable_dt(ctx, cfg.scheme)
    states = {}
    t_cur = 0.0
    for t in sorted(times):
        values, _ = advance(values, ctx, t - t_cur, dt, cfg.scheme)
        t_cur = t
        states[t] = VectorField3(fine_grid, values, unit_constrained=True,
                                 unit_tol=cfg.unit_tol)
    return states, ctx


def stencil_times(eps: float, t_final: float) -> tuple[list[float], float]:
    """Five times centered at t_final for the residual differencing.

    The spacing eps^2.75 / 40 resolves the eps^2-scale oscillation with
    enough margin that the 4th-order differencing error stays one order
    below the residual itself across a sweep.
    """
    delta = eps**2.75 / 40.0
    times = [t_final + k * delta for k in (-2, -1, 0, 1, 2)]
    if times[0] <= 0:
        raise ConfigError(
            f"t_final = {t_final:g} too small for the residual stencil")
    return times, delta


def compare_record(cfg: SimConfig, eps: float) -> ErrorRecord:
    """Fine vs corrected comparison at the sigma-scaled final time."""
    t_final = eps**cfg.sigma * cfg.T
    if cfg.J >= 1 and t_final / eps**2 > MAX_CORRECTOR_TAU:
        raise ConfigError(
            f"corrector evolution span tau = {t_final / eps**2:.3g} exceeds "
            f"{MAX_CORRECTOR_TAU:g}; J >= 1 comparisons need sigma-scaled "
            "short horizons")
    a, cell = material_for(cfg)
    fine_grid = fine_grid_for(cfg, eps)
    times, delta = stencil_times(eps, t_final)
    fine, fine_ctx = fine_states_at(cfg, eps, times, a, fine_grid)
    # no corrector-flow refresh inside the differencing window: a refresh
    # changes the flow (not the state) and would put a derivative kink
    # into the residual stencil
    run = corrected_trajectory(
        cell=cell, a=a, m_init_spec=init_spec(cfg), eps=eps, J=cfg.J,
        alpha=cfg.alpha, output_times=times, slow_grid=PeriodicGrid(cfg.n_slow),
        fine_grid=fine_grid, dtau=cfg.dtau, tau_refresh=cfg.tau_refresh,
        refresh_until=times[0])
    tilde = dict(zip(run.times, run.m_tilde))
    center = times[2]
    err = compute_error(fine[center], tilde[center], q_list=(0, 1), eps=eps)
    eta_field = residual_eta([tilde[t] for t in times],
                             fine_ctx.coefficient, cfg.alpha, delta)
    from .norms import norm_report

    eta = norm_report(eta_field, q_list=(0,), eps=eps)
    ldev = length_deviation(tilde[center], q_list=(0,), eps=eps)
    return ErrorRecord(eps=eps, sigma=cfg.sigma, J=cfg.J, t_final=center,
                       err=err, eta=eta, len_dev=ldev,
                       grad_inf_fine=grad_sup(fine[center]))


def _sweep_worker(args):
    cfg, eps = args
    return compare_record(cfg, eps)


# --- commands ------------------------------------------------------------------


def run_cell(cfg: SimConfig) -> ExperimentResult:
    out = _prepare_out(cfg, "cell")
    a, cell = material_for(cfg)
    a_h = homogenized_coefficient(a, cell)
    write_csv(os.path.join(out, "cell.csv"), ("y", "a", "chi", "flux"),
              cell_csv_rows(a, cell))
    _write_text(os.path.join(out, "cell.gp"), _cell_plot_script())
    lines = [
        f"coefficient = {cfg.coefficient}",
        f"n_fast = {cfg.n_fast}",
        f"A_H = {_fmt(a_h)}",
        f"a_min = {_fmt(a.a_min)}",
        f"a_max = {_fmt(a.a_max)}",
        f"cell_residual_sup = {_fmt(cell.residual_sup)}",
        f"cell_path_discrepancy = {_fmt(cell.path_discrepancy)}",
        "status = PASS",
    ]
    summary = "\n".join(lines) + "\n"
    _write_text(os.path.join(out, "summary.txt"), summary)
    return ExperimentResult(ok=True, summary=summary,
                            data={"a_h": a_h, "cell": cell})


def _trajectory_artifacts(cfg, traj, out, label):
    write_csv(os.path.join(out, f"{label}_trajectory.csv"),
              ("t", "x", "mx", "my", "mz"), trajectory_csv_rows(traj))
    write_snapshot(os.path.join(out, f"{label}_final.bin"), traj.states[-1])


def run_fine(cfg: SimConfig) -> ExperimentResult:
    out = _prepare_out(cfg, "fine")
    eps = cfg.eps_list[0]
    a, _cell = material_for(cfg)
    fine_grid = fine_grid_for(cfg, eps)
    a_eps = sample_eps_coefficient(a, eps, fine_grid)
    ctx = LLOperatorContext(a_eps, cfg.alpha, fine_grid,
                            description=f"fine eps={eps:g}")
    m0 = build_initial_data(init_spec(cfg), fine_grid)
    t_end = eps**cfg.sigma * cfg.T
    traj = integrate(m0, ctx, t_end, dt=cfg.dt, scheme=cfg.scheme,
                     output_stride=cfg.output_stride)
    _trajectory_artifacts(cfg, traj, out, "fine")
    unit_dev = max(s.unit_deviation() for s in traj.states)
    lines = [
        f"eps = {_fmt(eps)}",
        f"n_fine = {fine_grid.n_points}",
        f"t_end = {_fmt(t_end)}",
        f"steps = {traj.metadata['n_steps']}",
        f"max_unit_deviation = {_fmt(unit_dev)}",
        f"grad_inf_final = {_fmt(grad_sup(traj.states[-1]))}",
        f"energy_initial = {_fmt(exchange_energy(traj.states[0], ctx))}",
        f"energy_final = {_fmt(exchange_energy(traj.states[-1], ctx))}",
        "status = PASS",
    ]
    summary = "\n".join(lines) + "\n"
    _write_text(os.path.join(out, "summary.txt"), summary)
    return ExperimentResult(ok=True, summary=summary, data={"trajectory": traj})


def run_hom(cfg: SimConfig) -> ExperimentResult:
    out = _prepare_out(cfg, "hom")
    a, cell = material_for(cfg)
    slow = PeriodicGrid(cfg.n_slow)
    ctx = LLOperatorContext(cell.a_h, cfg.alpha, slow, description="homogenized")
    m0 = build_initial_data(init_spec(cfg), slow)
    eps = cfg.eps_list[0]
    t_end = eps**cfg.sigma * cfg.T
    traj = integrate(m0, ctx, t_end, dt=cfg.dt, scheme=cfg.scheme,
                     output_stride=cfg.output_stride)
    _trajectory_artifacts(cfg, traj, out, "hom")
    lines = [
        f"A_H = {_fmt(cell.a_h)}",
        f"t_end = {_fmt(t_end)}",
        f"steps = {traj.metadata['n_steps']}",
        f"max_unit_deviation = {_fmt(max(s.unit_deviation() for s in traj.states))}",
        "status = PASS",
    ]
    summary = "\n".join(lines) + "\n"
    _write_text(os.path.join(out, "summary.txt"), summary)
    return ExperimentResult(ok=True, summary=summary, data={"trajectory": traj})


def run_correct(cfg: SimConfig) -> ExperimentResult:
    out = _prepare_out(cfg, "correct")
    eps = cfg.eps_list[0]
    t_end = eps**cfg.sigma * cfg.T
    if cfg.J >= 1 and t_end / eps**2 > MAX_CORRECTOR_TAU:
        raise ConfigError(
            f"corrector span tau = {t_end / eps**2:.3g} exceeds {MAX_CORRECTOR_TAU:g}")
    a, cell = material_for(cfg)
    run = corrected_trajectory(
        cell=cell, a=a, m_init_spec=init_spec(cfg), eps=eps, J=cfg.J,
        alpha=cfg.alpha, output_times=[t_end], slow_grid=PeriodicGrid(cfg.n_slow),
        fine_grid=fine_grid_for(cfg, eps), dtau=cfg.dtau,
        tau_refresh=cfg.tau_refresh)
    write_csv(os.path.join(out, "corrector_history.csv"),
              ("tau", "norm_v_L2", "norm_m1_L2", "norm_m2_L2",
               "ortho_defect", "mean_defect"),
              corrector_history_rows(run))
    final = run.m_tilde[-1]
    dev = float(np.abs(np.sqrt((final.values**2).sum(axis=0)) - 1.0).max())
    last = run.history[-1] if run.history else (t_end / eps**2, 0, 0, 0, 0, 0)
    lines = [
        f"eps = {_fmt(eps)}",
        f"J = {cfg.J}",
        f"t_end = {_fmt(t_end)}",
        f"tau_end = {_fmt(t_end / eps**2)}",
        f"refreshes = {run.refresh_count}",
        f"final_norm_v_L2 = {_fmt(last[1])}",
        f"final_norm_m1_L2 = {_fmt(last[2])}",
        f"final_norm_m2_L2 = {_fmt(last[3])}",
        f"final_ortho_defect = {_fmt(last[4])}",
        f"final_mean_defect = {_fmt(last[5])}",
        f"length_deviation_sup = {_fmt(dev)}",
        "status = PASS",
    ]
    summary = "\n".join(lines) + "\n"
    _write_text(os.path.join(out, "summary.txt"), summary)
    return ExperimentResult(ok=True, summary=summary, data={"run": run})


def run_compare(cfg: SimConfig) -> ExperimentResult:
    out = _prepare_out(cfg, "compare")
    eps = cfg.eps_list[0]
    record = compare_record(cfg, eps)
    write_csv(os.path.join(out, "compare.csv"), SWEEP_CSV_HEADER,
              sweep_csv_rows([record]))
    lines = [
        f"eps = {_fmt(eps)}",
        f"J = {cfg.J}",
        f"sigma = {_fmt(cfg.sigma)}",
        f"t_final = {_fmt(record.t_final)}",
        f"err_L2 = {_fmt(record.err.hq[0])}",
        f"err_H1 = {_fmt(record.err.hq[1])}",
        f"eta_L2 = {_fmt(record.eta.l2)}",
        f"len_dev_L2 = {_fmt(record.len_dev.l2)}",
        f"grad_inf_fine = {_fmt(record.grad_inf_fine)}",
        "status = PASS",
    ]
    summary = "\n".join(lines) + "\n"
    _write_text(os.path.join(out, "summary.txt"), summary)
    return ExperimentResult(ok=True, summary=summary, data={"record": record})


def run_sweep(cfg: SimConfig) -> ExperimentResult:
    out = _prepare_out(cfg, "sweep")
    if len(cfg.eps_list) < 3:
        raise ConfigError("a sweep needs at least 3 eps values")
    jobs = [(cfg, eps) for eps in cfg.eps_list]
    workers = cfg.workers if cfg.workers > 0 else min(len(jobs), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_sweep_worker, jobs))
    else:
        records = [_sweep_worker(job) for job in jobs]
    records.sort(key=lambda r: r.eps)
    result = fit_sweep(records, norm_key=cfg.norm_key)
    write_csv(os.path.join(out, "sweep.csv"), SWEEP_CSV_HEADER,
              sweep_csv_rows(records))
    _write_text(os.path.join(out, "sweep.gp"),
                _sweep_plot_script(cfg.norm_key, result))
    slope_ok = cfg.slope_min <= result.fitted_slope <= cfg.slope_max
    r2_ok = result.r_squared >= cfg.r2_min
    ok = slope_ok and r2_ok
    lines = [
        f"sigma = {_fmt(cfg.sigma)}",
        f"J = {cfg.J}",
        f"norm_key = {cfg.norm_key}",
        f"eps = {', '.join(_fmt(e) for e in sorted(cfg.eps_list))}",
        f"fitted_slope = {_fmt(result.fitted_slope)}"
        f"  [bounds {_fmt(cfg.slope_min)} .. {_fmt(cfg.slope_max)}]"
        f"  {'PASS' if slope_ok else 'FAIL'}",
        f"r_squared = {_fmt(result.r_squared)}"
        f"  [min {_fmt(cfg.r2_min)}]  {'PASS' if r2_ok else 'FAIL'}",
        f"status = {'PASS' if ok else 'FAIL'}",
    ]
    summary = "\n".join(lines) + "\n"
    _write_text(os.path.join(out, "summary.txt"), summary)
    return ExperimentResult(ok=ok, summary=summary,
                            data={"result": result, "records": records})


def run_fig1(cfg: SimConfig) -> ExperimentResult:
    """Oscillatory-coefficient showcase run with qualitative gates.

    Reproduces the short-horizon experiment (difference field on a window
    of 7 oscillation wavelengths over two fast-time units), then checks
    that the difference's dominant spatial frequency sits near 1/eps and
    that its fast-time oscillation amplitude at a fixed node decays.
    """
    out = _prepare_out(cfg, "fig1")
    eps = cfg.eps_list[0]
    a, cell = material_for(cfg)
    fine_grid = fine_grid_for(cfg, eps)
    slow = PeriodicGrid(cfg.n_slow)
    t_end = 2.0 * eps**2

    a_eps = sample_eps_coefficient(a, eps, fine_grid)
    ctx = LLOperatorContext(a_eps, cfg.alpha, fine_grid,
                            description=f"fine eps={eps:g}")
    m_init = build_initial_data(init_spec(cfg), fine_grid)
    dt = cfg.dt if cfg.dt is not None else stable_dt(ctx, cfg.scheme)
    # sample the fast-time oscillation (period ~ 0.2 eps^2) densely
    stride = max(1, int(round(0.005 * eps**2 / dt)))
    traj = integrate(m_init, ctx, t_end, dt=dt, scheme=cfg.scheme,
                     output_stride=stride)

    hom_ctx = LLOperatorContext(cell.a_h, cfg.alpha, slow, description="homogenized")
    hom_values = build_initial_data(init_spec(cfg), slow).values
    dt_slow = stable_dt(hom_ctx)
    t_cur = 0.0
    diffs, times = [], []
    unit_dev = 0.0
    for t, state in zip(traj.times, traj.states):
        hom_values, _ = advance(hom_values, hom_ctx, t - t_cur, dt_slow)
        t_cur = t
        hom_fine = refine_field(
            VectorField3(slow, hom_values, unit_constrained=True), fine_grid)
        diff = state.values - hom_fine.values
        diffs.append(diff)
        times.append(t)
        unit_dev = max(unit_dev, state.unit_deviation())

    taus = np.array(times) / eps**2
    diff_x = np.array([d[0] for d in diffs])  # (n_times, n_fine)

    # gate 1: dominant spatial frequency of the difference near 1/eps
    spec = np.abs(np.fft.rfft(diffs[-1][0]))
    k_peak = int(np.argmax(spec[1:]) + 1)
    freq_ok = 0.5 / eps <= k_peak <= 2.0 / eps

    # gate 2: fast-time oscillation amplitude decays from tau ~ 0.2 to ~ 2,
    # probed at the node with the strongest early oscillation (nodes where
    # the base gradient nearly vanishes carry no decaying component)
    def window_amp_per_node(lo, hi):
        sel = (taus >= lo) & (taus <= hi)
        vals = diff_x[sel]
        return 0.5 * (vals.max(axis=0) - vals.min(axis=0))

    early = window_amp_per_node(0.1, 0.3)
    late = window_amp_per_node(1.8, 2.0)
    node = int(np.argmax(early))
    series = diff_x[:, node]
    amp_early = float(early[node])
    amp_late = float(late[node])
    decay_ok = amp_late <= 0.5 * amp_early

    x = fine_grid.nodes
    window = x <= 7.0 * eps
    panel_steps = max(1, len(times) // 20)
    sol_rows, diff_rows = [], []
    for idx in list(range(0, len(times), panel_steps)) + [len(times) - 1]:
        t = times[idx]
        diff_row = diffs[idx][0]
        for i in np.nonzero(window)[0]:
            m_eps_x = traj.states[idx].values[0, i]
            sol_rows.append((t, x[i], m_eps_x, m_eps_x - diff_row[i]))
            diff_rows.append((t, x[i], diff_row[i]))
    write_csv(os.path.join(out, "fig1_solution.csv"),
              ("t", "x", "m_eps_x", "m0_x"), sol_rows)
    write_csv(os.path.join(out, "fig1_difference.csv"),
              ("t", "x", "diff_x"), diff_rows)
    write_csv(os.path.join(out, "fig1_series.csv"), ("t", "tau", "diff_x_at_node"),
              [(t, tau, v) for t, tau, v in zip(times, taus, series)])
    _write_text(os.path.join(out, "fig1.gp"),
                _fig1_plot_script(times[-1], 7.0 * eps))

    ok = freq_ok and decay_ok and unit_dev < 1e-10
    lines = [
        f"eps = {_fmt(eps)}",
        f"alpha = {_fmt(cfg.alpha)}",
        f"t_end = {_fmt(t_end)}",
        f"max_unit_deviation = {_fmt(unit_dev)}"
        f"  [max 1e-10]  {'PASS' if unit_dev < 1e-10 else 'FAIL'}",
        f"spatial_peak_mode = {k_peak}"
        f"  [bounds {_fmt(0.5 / eps)} .. {_fmt(2.0 / eps)}]"
        f"  {'PASS' if freq_ok else 'FAIL'}",
        f"probe_node = {node}",
        f"amp_tau_0.2 = {_fmt(amp_early)}",
        f"amp_tau_2.0 = {_fmt(amp_late)}",
        f"amp_ratio = {_fmt(amp_late / amp_early if amp_early else float('nan'))}"
        f"  [max 0.5]  {'PASS' if decay_ok else 'FAIL'}",
        f"status = {'PASS' if ok else 'FAIL'}",
    ]
    summary = "\n".join(lines) + "\n"
    _write_text(os.path.join(out, "summary.txt"), summary)
    return ExperimentResult(ok=ok, summary=summary, data={
        "k_peak": k_peak, "amp_early": amp_early, "amp_late": amp_late,
        "taus": taus, "series": series, "unit_dev": unit_dev,
    })


COMMANDS = {
    "cell": run_cell,
    "fine": run_fine,
    "hom": run_hom,
    "correct": run_correct,
    "compare": run_compare,
    "sweep": run_sweep,
    "fig1": run_fig1,
}


def run_command(command: str, cfg: SimConfig) -> ExperimentResult:
    try:
        runner = COMMANDS[command]
    except KeyError:
        raise ConfigError(
            f"unknown command '{command}'; expected one of {sorted(COMMANDS)}"
        ) from None
    return runner(cfg)


# --- plot scripts ----------------------------------------------------------------


def _cell_plot_script() -> str:
    return """# regenerate with: gnuplot cell.gp
set datafile separator ','
set terminal pngcairo size 900,600
set output 'cell.png'
set key outside
set xlabel 'y'
plot 'cell.csv' skip 1 using 1:2 with lines title 'a(y)', \\
     'cell.csv' skip 1 using 1:3 with lines title 'corrector', \\
     'cell.csv' skip 1 using 1:4 with lines title 'flux a(1+chi_y)'
"""


def _sweep_plot_script(norm_key: str, result) -> str:
    col = {"err_L2": 5, "err_H1": 6, "eta_L2": 7, "len_dev_L2": 8}[norm_key]
    slope = result.fitted_slope
    intercept = result.fitted_intercept
    return f"""# regenerate with: gnuplot sweep.gp
set datafile separator ','
set terminal pngcairo size 800,600
set output 'sweep.png'
set logscale xy
set xlabel 'eps'
set ylabel '{norm_key}'
fit_line(x) = exp({_fmt(intercept)}) * x**{_fmt(slope)}
plot 'sweep.csv' skip 1 using 1:{col} with points pt 7 ps 1.5 title 'measured', \\
     fit_line(x) with lines dt 2 title 'slope {slope:.3f}'
"""


def _fig1_plot_script(t_final: float, x_max: float) -> str:
    return f"""# regenerate with: gnuplot fig1.gp
set datafile separator ','
set terminal pngcairo size 1200,500
set output 'fig1.png'
set multiplot layout 1,2
set xlabel 'x'
set xrange [0:{_fmt(x_max)}]
set title 'x-component at t = {_fmt(t_final)}'
plot 'fig1_solution.csv' skip 1 using ($1=={_fmt(t_final)}?$2:1/0):3 \\
       with lines title 'oscillatory', \\
     'fig1_solution.csv' skip 1 using ($1=={_fmt(t_final)}?$2:1/0):4 \\
       with lines title 'homogenized'
unset xrange
set xlabel 'tau = t/eps^2'
set title 'difference at fixed node'
plot 'fig1_series.csv' skip 1 using 2:3 with lines notitle
unset multiplot
"""
