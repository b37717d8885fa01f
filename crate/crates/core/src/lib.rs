//! Regularized unconstrained feature models with cross-entropy and
//! squared-error losses.
//!
//! - [`model`]: problem dimensions, `(W, H, b)` state, labels, text file format.
//! - [`losses`]: objectives, analytic gradients and Hessian quadratic forms,
//!   finite-difference oracles.
//! - [`landscape`]: global-optimality certificates, negative-curvature escape
//!   directions, rotation normalization, singular-value structure.
//! - [`collapse`]: neural-collapse metrics, simplex ETFs, ETF-family minimizers.
//! - [`optimize`]: gradient descent with saddle escape and trajectory recording.

pub mod collapse;
pub mod error;
pub mod landscape;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optimize;

pub use collapse::{
    build_global_min_ce, build_global_min_mse, collapse_metrics, etf_gram, make_etf, random_rotation, CollapseMetrics,
};
pub use error::{Result, UfmError};
pub use landscape::{
    certify, check_balancedness, escape_direction, escape_direction_ce, escape_direction_mse, null_vector,
    numerical_rank, rotation_normalize, singular_structure, CertificateReport, EscapeDirection, SingularStructure,
    Tolerances, Verdict,
};
pub use losses::{DirectionTriple, GradientTriple};
pub use model::{LossKind, ModelState, ProblemSpec};
pub use optimize::{init_random, run, run_from, Event, OptimizerConfig, RunOutcome, TrajectoryRecord, TrajectoryRow};

pub use nalgebra::{DMatrix, DVector};
