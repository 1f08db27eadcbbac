"""Numerical engine for zero-sum stochastic differential games on bounded
domains: a monotone finite-difference Isaacs solver, epsilon-optimal strategy
synthesis, Euler-Maruyama simulation of the controlled diffusion, and a
statistical verification suite for the dynamic programming principle."""

from .domain import Barrier, Domain, SubdomainFamily, boundary_crossing, contains, quadratic_barrier, verify_barrier
from .errors import (
    DiffGameError,
    MeshTooCoarse,
    NoAdmissibleIndex,
    NoConvergence,
    OutsideDomain,
    SingularLinearSystem,
    StepRejected,
    UsageError,
)
from .fd_solver import (
    AnalyticField,
    Lattice,
    ValueField,
    build_lattice,
    discretize_L,
    field_derivatives,
    holder_quotient,
    policy_iteration_solve,
)
from .game_model import (
    ControlGrid,
    GameInstance,
    GameSpec,
    builtin_game,
    check_bounds,
    check_ellipticity,
    check_factorization,
    eval_diffusion,
    validate_game,
)
from .isaacs import FieldDerivatives, bar_L_apply, isaacs_H, select_alpha, select_beta
from .sde_sim import (
    LambdaRule,
    ParamProcessRule,
    PathRecord,
    StopRule,
    apply_param_rule,
    dpp_payoff,
    payoff,
    simulate_batch,
    simulate_path,
)
from .strategies import (
    AlphaResponse,
    ControlSignal,
    Strategy,
    alpha_step,
    beta_step,
    strategy_pair_saddle,
)
from .verify import (
    CheckReport,
    McEstimate,
    deviation_check,
    dpp_residual,
    exhaustion_check,
    insensitivity_check,
    localization_check,
    mc_value,
    moment_check,
    occupation_bound_check,
    p_invariance_check,
    sample_kappa,
    submartingale_check,
    supermartingale_check,
)

__version__ = "0.1.0"
