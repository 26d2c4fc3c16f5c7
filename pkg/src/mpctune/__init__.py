"""Closed-loop tuning of QP-based MPC policies with scenario certificates.

The package tunes the cost matrices and constraint tightenings of a model
predictive controller by differentiating through closed-loop trajectories
(active-set sensitivities of the per-step QP, chained by a rollout recursion),
then bounds the closed-loop constraint-violation probability of the tuned
policy with a scenario certificate over a drawn uncertainty dataset.
"""

from .errors import (
    ConfigError,
    DimensionMismatch,
    Infeasible,
    MaxIterationsExceeded,
    NotStronglyConvex,
    SingularMass,
    SingularSensitivity,
    TrainingSetViolation,
)
from .qp_core import (
    KKTResiduals,
    PrimalDualSolution,
    StandardQP,
    kkt_residuals,
    qp_backend,
    solve_qp,
)
from .mpc_policy import (
    CondensedMPC,
    MPCModel,
    PolicyStep,
    ThetaParams,
    condense,
    mpc_jacobians,
    mpc_solve,
    theta_dim,
)
from .qp_diff import (
    ParamJacobians,
    build_ops,
    complementarity_margin,
    dual_jacobian,
    primal_jacobian,
)
from .plants import (
    PlantDef,
    Scenario,
    ScenarioSpec,
    cartpole_default,
    dataset_digest,
    load_dataset,
    make_plant,
    rk4_step,
    sample_dataset,
    sample_scenario,
    save_dataset,
)
from .rollout import (
    TrajectoryBundle,
    nominal_loss,
    robust_loss,
    rollout_with_jacobian,
    simulate,
    violation_metrics,
)
from .tuning import (
    P2LResult,
    TuneResult,
    pick2learn,
    project_theta,
    scan_violations,
    seed_margins,
    solve_penalized,
    tune_nominal,
    verify_on_training,
)
from .scenario_cert import (
    Certificate,
    certify,
    epsilon_of_k,
    validate_empirical,
)

__version__ = "0.1.0"
