//! Numerical checks of the defense's convergence story: Gaussian smoothing,
//! the two-point pool gradient estimator, diversity and Lipschitz
//! estimation, and the two closed-form bounds the pool is supposed to obey.
//!
//! Everything here runs in f64 on small synthetic functions, away from the
//! f32 inference stack, so statistical tolerances are the only slack.

mod convergence;
mod estimate;
mod experiments;
mod fields;

pub use convergence::{
    pool_slowdown_experiment, shrink_acceleration_experiment, ConvergenceConfig, MarginField,
};
pub use estimate::{
    estimate_lipschitz, estimate_nu, gaussian_smooth, grad_estimator_g, moment_mc,
    LipschitzEstimate, SmoothingSpec,
};
pub use experiments::{
    theorem1_experiment, theorem2_experiment, Theorem1Config, Theorem2Config,
};
pub use fields::{
    jitter_pool, make_field, AffineMap, FieldKind, LinearField, MarginToyField, QuadraticField,
    RotationMap, ScaleMap,
};

use serde::{Deserialize, Serialize};

/// A scalar function on R^d, queried as a black box.
pub trait ScalarField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> f64;
}

/// A map R^d -> R^d standing in for one purifier.
pub trait PointMap: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
}

/// The curvature aggregate steering both the step size and the bound:
/// 4v^2/mu^2 + (4v/mu) L0(m) sqrt(d) + L0(m)^2 d.
pub fn gamma(nu: f64, mu: f64, l0_m: f64, dim: usize) -> f64 {
    let d = dim as f64;
    4.0 * nu * nu / (mu * mu) + (4.0 * nu / mu) * l0_m * d.sqrt() + l0_m * l0_m * d
}

/// Constant step size prescribed for the estimator trajectory.
pub fn step_size(
    radius: f64,
    epsilon: f64,
    queries: usize,
    l0_f: f64,
    l0_m: f64,
    gamma_val: f64,
    dim: usize,
) -> f64 {
    let d = dim as f64;
    let q1 = (queries + 1) as f64;
    (2.0 * radius * epsilon / (q1 * l0_f.powi(3) * d * d)).sqrt()
        * (1.0 / (l0_m * gamma_val)).sqrt()
}

/// Right side of the trajectory gradient-norm bound.
pub fn gradient_norm_bound(
    radius: f64,
    epsilon: f64,
    queries: usize,
    l0_f: f64,
    l0_m: f64,
    gamma_val: f64,
    dim: usize,
) -> f64 {
    let d = dim as f64;
    let q1 = (queries + 1) as f64;
    (2.0 * l0_f.powi(5) * radius * d * d / (q1 * epsilon)).sqrt()
        * (gamma_val * l0_m.powi(3)).sqrt()
}

/// Query-count order expression for driving the averaged squared gradient
/// norm below `delta`. Reported, never asserted.
pub fn query_order(
    radius: f64,
    epsilon: f64,
    delta: f64,
    l0_f: f64,
    l0_m: f64,
    gamma_val: f64,
    dim: usize,
) -> f64 {
    let d = dim as f64;
    l0_f.powi(5) * radius * d * d / (epsilon * delta * delta) * gamma_val * l0_m.powi(3)
}

/// Largest smoothing radius the local-smoothness argument tolerates.
pub fn mu_cap(epsilon: f64, dim: usize, l0_composed: f64) -> f64 {
    epsilon / ((dim as f64).sqrt() * l0_composed)
}

/// Flip-probability bound for the sign of the random-search direction,
/// clipped at 1.
pub fn sign_flip_bound(nu: f64, l0_f: f64, h_abs: f64) -> f64 {
    (2.0 * nu * l0_f / h_abs).min(1.0)
}

/// One checked configuration of a bound experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremRow {
    pub experiment: String,
    pub config_id: String,
    pub k: usize,
    pub nu_hat: f64,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Shared trajectory metadata for a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub queries: usize,
    pub eta: f64,
    pub mu: f64,
    pub dim: usize,
    pub radius: f64,
    pub epsilon: f64,
}

/// Outcome of one theorem experiment: per-configuration rows, probes that
/// had to be skipped as degenerate, and informational notes (such as the
/// computed query-complexity order, which is reported but never asserted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub rows: Vec<TheoremRow>,
    pub meta: TrajectoryMeta,
    pub skipped: Vec<String>,
    pub notes: Vec<String>,
}

impl TheoremReport {
    /// Fraction of rows whose bound held.
    pub fn pass_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 1.0;
        }
        self.rows.iter().filter(|r| r.pass).count() as f64 / self.rows.len() as f64
    }
}
