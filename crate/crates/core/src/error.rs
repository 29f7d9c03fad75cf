//! Error types shared across the library.

use thiserror::Error;

use crate::integrate::Trajectory;

#[derive(Debug, Error)]
pub enum Error {
    /// Parameter or state validation failure.
    #[error("validation: {0}")]
    Validation(String),

    /// Tolerance outside the supported range.
    #[error("tolerance: {0}")]
    Tolerance(String),

    /// State too close to a coordinate-chart singularity (I = 0 or c = +-1).
    #[error("singularity: {what}")]
    Singularity { what: &'static str },

    /// Stereographic chart breakdown at the south pole.
    #[error("stereographic pole: |z| = {abs_z:e} exceeds chart range")]
    Pole { abs_z: f64 },

    /// Adaptive step size underflowed; the partial trajectory is kept.
    #[error("step failure at t = {t}: step size {h:e} below floor")]
    StepFailure {
        t: f64,
        h: f64,
        partial: Box<Trajectory>,
    },

    /// Gram-Schmidt rank loss during tangent reorthonormalization.
    #[error("degenerate tangent set at t = {t}")]
    DegenerateTangent { t: f64 },

    /// Iterative estimate failed its convergence check.
    #[error("no convergence: {0}")]
    NonConvergence(String),

    /// On-shell sampler exhausted its rejection budget.
    #[error("empty shell: no on-shell state after {attempts} draws")]
    EmptyShell { attempts: u64 },

    /// Input outside the mathematical domain of the operation.
    #[error("domain: {0}")]
    Domain(String),

    /// Series not uniformly sampled where uniformity is required.
    #[error("grid: {0}")]
    Grid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
