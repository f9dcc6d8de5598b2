"""Hermite spectral Galerkin solvers for mean-field Fokker-Planck equations."""

from .asymptotics import (
    approx_R,
    compute_alpha_shift,
    compute_zeta,
    corrective_drift,
    critical_epsilon,
    effective_diffusion,
    ou_corrected_density,
    solve_noise_poisson,
)
from .bifurcation import (
    BifurcationBranch,
    SelfConsistencyMap,
    classify_stability,
    colored_R,
    continue_branch,
    find_fixed_points,
    free_energy,
    white_critical_beta,
    white_R,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    HermfpError,
    OscillationError,
    QuadratureError,
    SimulationError,
    SingularSystemError,
    SolverError,
)
from .hermite import (
    HermiteBasis,
    IndexSet,
    SpectralField,
    eval_hermite,
    evaluate_field,
    evaluate_grid,
    evaluate_marginal,
    gauss_hermite_rule,
    hermite_transform,
    make_index_set,
)
from .models import NoiseModel, ProblemSpec, bistable_potential, quadratic_potential
from .operators import (
    OperatorMatrix,
    colored_operator,
    derivative_matrix,
    fokker_planck_template,
    mckean_operator_white,
    poly_diff_operator,
    position_matrix,
    schrodinger_operator,
)
from .particles import McConfig, McEstimate, simulate, sweep_beta
from .solver import (
    SolverConfig,
    compute_first_moment,
    gaussian_field,
    integrate_linear,
    integrate_mckean,
    semi_implicit_step,
    steady_state_linear,
    steady_state_mckean,
)

__version__ = "0.1.0"
