//! Finite-horizon covariance steering for discrete-time linear systems with
//! output feedback.
//!
//! The solver steers the mean and covariance of the true state of a linear
//! system to prescribed terminal values using a control policy that acts on a
//! filtered state estimate. Estimation errors are allowed to be correlated
//! with the estimate, which the joint (augmented) covariance of the true
//! state and the estimate tracks exactly.
//!
//! Pipeline:
//!
//! 1. [`model`] — problem ingestion and validation,
//! 2. [`filter`] — offline design of the (possibly underweighted) Kalman
//!    filter schedule,
//! 3. [`sdp`] — assembly of the relaxed convex subproblem as an abstract
//!    conic program and its solution through a pluggable backend,
//! 4. [`scp`] — the outer rank-minimization loop with augmented-Lagrangian
//!    penalty updates, producing the feedback policy,
//! 5. [`montecarlo`] — closed-loop validation of the steered distribution.
//!
//! [`linalg`] provides the shared symmetric-matrix kernels and [`augmented`]
//! the joint-statistics recursions everything else is built on.

// Linked through clarabel's BLAS bindings; referenced so the `system`
// feature selection applies.
use openblas_src as _;

pub mod augmented;
pub mod error;
pub mod filter;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod scp;
pub mod sdp;

pub(crate) mod serde_util;

pub use error::{Error, Result};
pub use linalg::SymMatrix;
pub use model::{Policy, ProblemSpec};

// Downstream crates handle the same matrix types this library exposes.
pub use nalgebra;
