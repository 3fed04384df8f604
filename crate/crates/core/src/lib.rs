//! Matrix-free solvers for the Kronecker-structured SPD system arising in
//! Bayesian source separation of sky maps.
//!
//! The posterior mean of the source maps solves
//!
//! ```text
//! (Q + BᵀCB) μ = BᵀC𝒴,      B = A ⊗ I_N,   C = T ⊗ N,   Q = P ⊗ D²,
//! ```
//!
//! where `A` is the small n×m mixing matrix, `T` holds per-frequency noise
//! precisions, `N` per-pixel hit counts, `P` per-source prior scales, and `D`
//! is the sparse neighbor operator of one sky face. Every factor is either
//! diagonal or small, so the mN×mN system is never materialized: all products
//! reduce to stencil sweeps and N×k block algebra (see [`grid`], [`operators`]).
//!
//! Three solvers are provided and cross-validated against a dense oracle:
//!
//! * [`cg`] — conjugate gradients on the Kronecker form,
//! * [`lanczos`] — block Lanczos projection of the equivalent generalized
//!   Sylvester equation `N⁻¹D²M + M·AᵀTAP⁻¹ = Y·T·A·P⁻¹`, with a cheap
//!   residual estimate and a two-pass, two-block memory footprint,
//! * [`sparse_dense`] — the Schur-decomposition baseline that solves m shifted
//!   systems sequentially.
//!
//! [`sim`] generates the synthetic data protocol and [`mapfile`] defines the
//! on-disk map format used by the benchmark CLI.

pub mod cg;
pub mod dense;
pub mod grid;
pub mod lanczos;
pub mod mapfile;
pub mod model;
pub mod operators;
pub mod report;
pub mod sim;
pub mod sparse_dense;
pub mod stack;

pub use cg::{solve_cg, CgConfig};
pub use grid::SkyGrid;
pub use lanczos::{solve_sylvester, SylvesterOptions, SylvesterProblem};
pub use model::ModelSpec;
pub use report::{Method, SolveReport};
pub use sim::{simulate, SimConfig};
pub use sparse_dense::{solve_sparse_dense, SparseDenseOptions};
pub use stack::MapStack;

/// Unified error type for the whole crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value (level range, non-positive model entries, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Invalid argument to an operation (out-of-range index, non-positive frequency, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Dimension mismatch between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Numerical breakdown (rank-deficient Lanczos block, non-finite iterate).
    #[error("numerical breakdown at iteration {iteration}: {reason}")]
    Breakdown { iteration: usize, reason: String },

    /// A denominator φ_i + ρ_j of the projected solve is numerically zero.
    #[error("singular pencil: {0}")]
    SingularPencil(String),

    /// A configured memory budget would be exceeded.
    #[error("out of memory: requires {required} bytes, budget is {budget} bytes")]
    OutOfMemory { required: u64, budget: u64 },

    /// A hard size guard refused the operation (dense oracle at production sizes).
    #[error("size guard exceeded: {0}")]
    SizeGuard(String),

    /// Malformed map file.
    #[error("map format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
