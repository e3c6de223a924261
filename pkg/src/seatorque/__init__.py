"""Series-elastic actuator torque estimation with learned residual dynamics.

The package simulates a series-elastic joint whose load carries dynamics the
nominal model does not know (friction, a passive limb), learns those residual
torques online with Gaussian-process regression, fuses the learned correction
into an augmented-state extended Kalman filter that treats the active external
torque as an estimated state, and propagates guaranteed ellipsoidal error
bounds alongside the filter.
"""

from .bounds import (
    ConfidenceSet,
    Ellipsoid,
    GpErrorBound,
    affine_map,
    axis_points,
    chi_square_scale,
    contains,
    gp_error_ellipsoid,
    initial_confidence_set,
    linearization_error_ellipsoid,
    map_error_to_state,
    minkowski_contains,
    minkowski_outer,
    theorem1_step,
)
from .config import ScenarioSpec, bundled_scenario_names, parse_scenario, resolve_scenario
from .dynamics import (
    HiddenResidual,
    KinematicsSample,
    SeaParams,
    default_hidden_1dof,
    default_params_1dof,
    discretize_jacobian,
    discretize_step,
    nominal_dynamics,
    nominal_jacobian,
    plant_sample,
    plant_step,
    residual_target,
    rk4_step,
    spring_torque,
    true_residual,
    zero_hidden,
)
from .errors import (
    ConfigError,
    FactorizationError,
    InnovationSingularError,
    MalformedCsvError,
    NonFiniteStateError,
    SeatorqueError,
    SingularInertiaError,
)
from .filters import (
    FilterConfig,
    FilterState,
    StepRecord,
    akf_step,
    ekf_predict,
    ekf_update,
    gp_akf_step,
    initial_state,
    process_noise,
    reconstruct_gp_input,
    spring_torque_estimate,
)
from .gp import (
    GpModel,
    Hyperparameters,
    MultiGp,
    add_point,
    budget_evict,
    condition,
    log_marginal_likelihood,
    mean_jacobian,
    optimize_hyperparameters,
    predict,
    se_kernel,
)
from .harness import (
    McResult,
    PidController,
    ScenarioResult,
    SigmoidReference,
    minimum_jerk,
    monte_carlo,
    replay_estimation,
    resistance_torque,
    run_scenario,
    static_equilibrium,
)

__version__ = "0.1.0"
