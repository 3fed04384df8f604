//! TOML configuration files. Every knob here is also a command-line flag;
//! flags win over file values, file values win over built-in defaults.
//!
//! ```toml
//! [sim]
//! level = 4
//! seed = 7
//! source_std = 1.0
//! noiseless = false
//!
//! [model]
//! tau = 2.0          # uniform noise precision (or `t = [...]` per channel)
//! p = [1.0, 1.0, 1.0, 1.0]
//! nhits = 1.0        # uniform per-pixel hit count
//! kappa_s = -2.65
//! kappa_d = 1.5
//!
//! [solver]
//! method = "lanczos-sylvester"
//! tol = 1e-8
//! max_iter = 200
//! shifted_tol = 1e-12
//! mem_budget = 100000
//! threads = 4
//! ```

use std::path::Path;

use serde::Deserialize;

use ksep_core::model::{
    build_mixing_matrix, default_t, DEFAULT_REF_INDEX, KAPPA_DUST, KAPPA_SYNCHROTRON,
    PLANCK_FREQUENCIES_GHZ,
};
use ksep_core::{Error, ModelSpec, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub solver: SolverSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub level: Option<u32>,
    pub seed: Option<u64>,
    pub source_std: Option<f64>,
    pub noiseless: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Uniform noise precision for every channel.
    pub tau: Option<f64>,
    /// Per-channel noise precisions; wins over `tau`.
    pub t: Option<Vec<f64>>,
    /// Per-source prior scales.
    pub p: Option<Vec<f64>>,
    /// Uniform per-pixel hit count.
    pub nhits: Option<f64>,
    pub kappa_s: Option<f64>,
    pub kappa_d: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub method: Option<String>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub shifted_tol: Option<f64>,
    pub mem_budget: Option<u64>,
    pub threads: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

impl ModelSection {
    /// Builds the model for one sky face: the Planck mixing matrix with the
    /// configured spectral indices, then the T/P/nhits overrides.
    pub fn build_model(&self, npix: usize) -> Result<ModelSpec> {
        let frequencies = PLANCK_FREQUENCIES_GHZ.to_vec();
        let a = build_mixing_matrix(
            &frequencies,
            self.kappa_s.unwrap_or(KAPPA_SYNCHROTRON),
            self.kappa_d.unwrap_or(KAPPA_DUST),
            DEFAULT_REF_INDEX,
        )?;
        let m = a.ncols();
        let t = match (&self.t, self.tau) {
            (Some(t), _) => t.clone(),
            (None, Some(tau)) => vec![tau; frequencies.len()],
            (None, None) => default_t(),
        };
        let nhits = vec![self.nhits.unwrap_or(1.0); npix];
        let p = self.p.clone().unwrap_or_else(|| vec![1.0; m]);
        ModelSpec::new(frequencies, a, t, nhits, p, DEFAULT_REF_INDEX)
    }
}
