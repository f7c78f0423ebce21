//! Visual-inertial sliding-window estimation with adaptive residual
//! truncation, a bias-consistency safeguard, and stable state recovery,
//! plus a deterministic synthetic scenario generator and evaluation
//! metrics used by the benchmark CLI.

pub mod estimator;
pub mod guard;
pub mod imu;
pub mod kernel;
pub mod marginal;
pub mod math;
pub mod metrics;
pub mod sim;
pub mod solver;
pub mod state;
pub mod vision;

pub use estimator::{
    run_on_bundle, run_on_bundle_with, BccRow, BiasRow, Estimator, EstimatorConfig, FrameReport,
    Traces, WeightRow,
};
pub use guard::{
    consistency_check, guarded_solve, ConsistencyReport, GuardConfig, GuardedSolveReport,
};
pub use imu::{
    imu_residual, integrate, propagate, ImuError, ImuNoiseParams, ImuResidual, ImuSample,
    Preintegration, BIAS_REPROP_THRESHOLD,
};
pub use kernel::{
    build_shape, clamp_weight, compute_r_hat_max, effective_cost, narrow_shape,
    new_feature_residual, penalty, weight_update, AtlsConfig, AtlsShape, KernelError,
};
pub use marginal::{drop_slot_from_prior, MarginalPrior};
pub use solver::{
    alternate, marginalize_oldest, optimize_states, reweight_with_shape, update_weights,
    AlternateReport, FrameSlot, Method, SolveStats, SolverConfig, Window, LAMBDA_MAX,
    LAMBDA_MIN, WEIGHT_EPS,
};
pub use state::{
    BodyState, CameraModel, Feature, FeatureCategory, ProjectionError, StateError, DBA, DBW,
    DP, DTHETA, DV, STATE_DOF,
};
pub use metrics::{align_rigid, ate_rmse, rte_rmse, RTE_SEGMENT_LEN, STAMP_MATCH_TOL};
pub use sim::{
    generate, preset, ClusterMotion, ClusterSpec, FrameObs, LandmarkBlock, Scenario, SimBundle,
    PRESET_NAMES,
};
pub use vision::{
    rotation_compensated_parallax, triangulate_two_view, visual_residual, VisualResidual,
    MAX_DEPTH, MIN_DEPTH,
};
