"""starlab: stability certificates and learned-optimizer meta-training for
noisy quadratic models and toy neural tasks.

The package splits into theory (nqm, stability), the learned optimizer
(inner_opt, star, unroll), meta-training (meta_es), task definitions (tasks),
and the experiment harness (harness).
"""

from . import rng
from .inner_opt import (
    GATE_SCALE,
    GATE_SENSITIVITY,
    InnerState,
    NominalConfig,
    adam_direction,
    aggmo_direction,
    hyperparam_controller_update,
    init_state,
    nominal_direction,
    update_state,
)
from .meta_es import (
    AllDivergedError,
    DesyncError,
    EsEstimate,
    MetaConfig,
    MetaOptState,
    MetaStepRow,
    NqmFamily,
    PesParticle,
    PesStepResult,
    TrainingRecord,
    clip_global_norm,
    ema_smooth,
    es_gradient,
    init_particles,
    meta_step,
    meta_train,
    pes_gradient_step,
)
from .nqm import (
    DIVERGENCE_LIMIT,
    DynamicsMatrix,
    FdGradient,
    GradientVarianceEstimate,
    LinearOptimizerSpec,
    McLossEstimate,
    QuadraticTask,
    Trajectory,
    build_dynamics,
    empirical_gradient_variance,
    expected_loss,
    gradient_variance_profile,
    inverse_sqrt,
    mc_expected_loss,
    meta_gradient_fd,
    minimize_expected_loss,
    rollout_mc,
    state_covariance,
)
from .stability import (
    BoundCheck,
    CertificateAssumptionError,
    RobustBoundSpec,
    StabilityReport,
    cancellation_dynamics,
    certify_nominal,
    certify_preconditioned,
    certify_robust,
    spectral_radius,
)
from .star import (
    BETA_EXPONENT,
    BETA_OUTPUT,
    FeatureConfig,
    FeatureError,
    StarParams,
    TensorStats,
    blackbox_update,
    compute_features,
    compute_tensor_stats,
    init_star_params,
    load_params,
    mlp_forward,
    params_from_flat,
    params_to_flat,
    save_params,
    star_update,
)
from .tasks import (
    DatasetSpec,
    InnerTask,
    QuadraticInnerTask,
    SuiteEntry,
    ToyMlpTask,
    default_meta_task,
    generalization_suite,
    make_dataset,
    quadratic_task_adapter,
    toy_mlp_task,
)
from .unroll import (
    EvalResult,
    LoopState,
    OptimizerArm,
    evaluate_training,
    init_loop,
    run_segment,
)

__version__ = "0.1.0"
