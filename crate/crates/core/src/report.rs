//! Solver identification and the per-solve report emitted by every method.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The four solution strategies the benchmark driver can select.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Cg,
    LanczosSylvester,
    SparseDense,
    Dense,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Cg,
        Method::LanczosSylvester,
        Method::SparseDense,
        Method::Dense,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cg => "cg",
            Method::LanczosSylvester => "lanczos-sylvester",
            Method::SparseDense => "sparse-dense",
            Method::Dense => "dense",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown method '{s}'")))
    }
}

/// Wall time attributed to each phase of a solve, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    /// Stencil applications and the other large-block matvec work.
    pub d_apply: f64,
    /// Block inner products, orthogonalization sweeps and vector updates.
    pub orthogonalization: f64,
    /// Small dense algebra: eigen/Schur decompositions, projected solves.
    pub small_dense: f64,
    /// Map reads and writes performed inside the solve.
    pub io: f64,
}

impl PhaseTimes {
    /// Total time attributed to any phase.
    pub fn total(&self) -> f64 {
        self.d_apply + self.orthogonalization + self.small_dense + self.io
    }
}

/// What a solve did and what it cost.
///
/// `rel_residual` is the explicitly recomputed Euclidean Frobenius residual
/// ‖rhs − Q̂μ‖_F / ‖rhs‖_F so numbers are comparable across methods. Solvers
/// whose stopping rule lives in a weighted norm also report that value in
/// `weighted_rel_residual`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: Method,
    pub converged: bool,
    pub iterations: usize,
    pub rel_residual: f64,
    pub weighted_rel_residual: Option<f64>,
    pub wall_time_s: f64,
    pub history: Option<Vec<f64>>,
    pub peak_mem_bytes: u64,
    /// Peak number of simultaneously resident N×m working blocks the solver
    /// allocates (inputs excluded); the iterative solvers' memory contract.
    pub peak_blocks: usize,
    pub phases: PhaseTimes,
}

impl SolveReport {
    /// The stable external JSON schema: exactly the six documented fields.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "method": self.method.as_str(),
            "iterations": self.iterations,
            "rel_residual": self.rel_residual,
            "wall_time_s": self.wall_time_s,
            "history": self.history,
            "peak_mem_bytes": self.peak_mem_bytes,
        })
    }
}
