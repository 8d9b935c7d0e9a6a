"""Periodic homogenization toolkit for magnetization dynamics with an
oscillatory exchange coefficient: spectral grids, cell problems, projected
time integration, two-scale correctors, and convergence-rate verification."""

from .analysis import (
    ErrorRecord,
    SweepResult,
    compute_error,
    fit_decay,
    fit_rate,
    fit_sweep,
    length_deviation,
    residual_eta,
)
from .config import SimConfig, parse_config
from .correctors import (
    CorrectorState,
    ProjectionContext,
    RecursionBundle,
    assemble_m_tilde,
    averaging_A,
    corrected_trajectory,
    evolve_hierarchy,
    forcing_F1,
    forcing_Fj,
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
)
from .errors import (
    ConfigError,
    ConsistencyError,
    GridMismatchError,
    LlhomogError,
    NumericalError,
    ParameterError,
    ResolutionError,
)
from .grid import (
    PeriodicGrid,
    ScalarField,
    TwoScaleField3,
    VectorField3,
    evaluate_diagonal,
    refine_field,
    spectral_derivative,
)
from .llg import (
    LLOperatorContext,
    Trajectory,
    apply_exchange,
    build_initial_data,
    integrate,
    ll_rhs,
)
from .material import (
    CellSolution,
    CoefficientSpec,
    MaterialCoefficient,
    build_coefficient,
    homogenized_coefficient,
    sample_eps_coefficient,
    solve_cell_problem,
)
from .norms import NormReport, norm_hq, norm_hq_eps, norm_hqp, norm_linf, norm_wq_inf

__version__ = "0.1.0"
