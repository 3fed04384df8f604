//! Physical model constants: mixing matrix A, noise precision C = T ⊗ Nhits,
//! prior precision Q = P ⊗ D², and right-hand-side assembly BᵀC𝒴.
//!
//! The mixing matrix follows the four-source parametrization (CMB,
//! synchrotron, thermal dust, free-free) in antenna temperature units with a
//! Planck-law conversion factor per channel. Defaults reproduce the nine
//! Planck frequency channels.

use nalgebra::DMatrix;

use crate::{Error, MapStack, Result};

/// Planck constant, J·s (SI exact).
pub const H_PLANCK: f64 = 6.626_070_15e-34;
/// Boltzmann constant, J/K (SI exact).
pub const K_BOLTZMANN: f64 = 1.380_649e-23;
/// Dust temperature T₁ entering the conversion factor and the dust law, K.
pub const DUST_TEMP_K: f64 = 18.1;
/// Default synchrotron spectral index κ_s.
pub const KAPPA_SYNCHROTRON: f64 = -2.65;
/// Default thermal dust spectral index κ_d.
pub const KAPPA_DUST: f64 = 1.5;
/// Free-free spectral index (fixed, not a free parameter).
pub const KAPPA_FREE_FREE: f64 = -2.14;
/// The nine Planck channel center frequencies in GHz.
pub const PLANCK_FREQUENCIES_GHZ: [f64; 9] =
    [30.0, 44.0, 70.0, 100.0, 143.0, 217.0, 353.0, 545.0, 857.0];
/// Index of the 100 GHz reference channel within the default frequencies.
pub const DEFAULT_REF_INDEX: usize = 3;

/// Number of sources in the fixed four-component sky model.
pub const NUM_SOURCES: usize = 4;

fn psi(nu_ghz: f64) -> f64 {
    H_PLANCK * nu_ghz * 1e9 / (K_BOLTZMANN * DUST_TEMP_K)
}

/// Thermodynamic-to-antenna conversion factor c(ν) = (e^ψ−1)² / (ψ² e^ψ)
/// with ψ = hν / (k_B T₁).
pub fn planck_conversion(nu_ghz: f64) -> Result<f64> {
    if !(nu_ghz > 0.0) {
        return Err(Error::Argument(format!(
            "frequency must be positive, got {nu_ghz} GHz"
        )));
    }
    let psi = psi(nu_ghz);
    let em1 = psi.exp_m1();
    Ok(em1 * em1 / (psi * psi * psi.exp()))
}

/// Planck-law brightness factor B(ν) = ν / (e^ψ − 1) for the dust column.
fn planck_law(nu_ghz: f64) -> f64 {
    nu_ghz / psi(nu_ghz).exp_m1()
}

/// Builds the n×4 mixing matrix: CMB (ones), synchrotron power law κ_s,
/// modified-blackbody dust with index κ_d, and free-free power law −2.14,
/// all relative to the reference channel ν₀.
pub fn build_mixing_matrix(
    frequencies: &[f64],
    kappa_s: f64,
    kappa_d: f64,
    ref_index: usize,
) -> Result<DMatrix<f64>> {
    if frequencies.is_empty() || ref_index >= frequencies.len() {
        return Err(Error::Argument(format!(
            "reference index {ref_index} invalid for {} frequencies",
            frequencies.len()
        )));
    }
    let nu0 = frequencies[ref_index];
    let b0 = planck_law(nu0);
    let mut a = DMatrix::zeros(frequencies.len(), NUM_SOURCES);
    for (k, &nu) in frequencies.iter().enumerate() {
        let c = planck_conversion(nu)?;
        let ratio = nu / nu0;
        a[(k, 0)] = 1.0;
        a[(k, 1)] = c * ratio.powf(kappa_s);
        a[(k, 2)] = c * (planck_law(nu) / b0) * ratio.powf(kappa_d);
        a[(k, 3)] = c * ratio.powf(KAPPA_FREE_FREE);
    }
    Ok(a)
}

/// Default noise precision scales τ_k for the nine Planck channels.
pub fn default_t() -> Vec<f64> {
    vec![
        629_881.6,
        694_444.4,
        783_146.7,
        12_755_102.0,
        30_864_197.5,
        30_864_197.5,
        30_864_197.5,
        30_864_197.5,
        30_864_197.5,
    ]
}

/// Immutable model constants shared by every solver.
///
/// Field conventions: `t` holds the per-channel noise precisions τ_k, `nhits`
/// the per-pixel hit counts n_j (so pixel (j,k) noise variance is
/// 1/(τ_k·n_j)), and `p` the per-source prior scales φ_l of Q = P ⊗ D².
#[derive(Debug, Clone)]
pub struct ModelSpec {
    frequencies: Vec<f64>,
    a: DMatrix<f64>,
    t: Vec<f64>,
    nhits: Vec<f64>,
    p: Vec<f64>,
    ref_freq_index: usize,
}

impl ModelSpec {
    /// Validates and assembles a model. `a` must be n×m with full column
    /// rank and m ≤ n; `t` (length n), `nhits` (length N) and `p` (length m)
    /// must be strictly positive.
    pub fn new(
        frequencies: Vec<f64>,
        a: DMatrix<f64>,
        t: Vec<f64>,
        nhits: Vec<f64>,
        p: Vec<f64>,
        ref_freq_index: usize,
    ) -> Result<Self> {
        let (n, m) = a.shape();
        if m > n {
            return Err(Error::Config(format!(
                "mixing matrix has more sources ({m}) than channels ({n})"
            )));
        }
        if frequencies.len() != n {
            return Err(Error::Config(format!(
                "{} frequencies for {n} channels",
                frequencies.len()
            )));
        }
        if t.len() != n || p.len() != m {
            return Err(Error::Config(format!(
                "T has length {} (want {n}), P has length {} (want {m})",
                t.len(),
                p.len()
            )));
        }
        if ref_freq_index >= n {
            return Err(Error::Config(format!(
                "reference index {ref_freq_index} out of range for {n} channels"
            )));
        }
        for (name, vals) in [("T", &t), ("Nhits", &nhits), ("P", &p)] {
            if let Some(bad) = vals.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be strictly positive and finite, found {bad}"
                )));
            }
        }
        let svd = a.clone().svd(false, false);
        let max_sv = svd.singular_values.max();
        if svd.rank(1e-12 * max_sv * n.max(m) as f64) < m {
            return Err(Error::Config(
                "mixing matrix is column-rank deficient".into(),
            ));
        }
        Ok(Self {
            frequencies,
            a,
            t,
            nhits,
            p,
            ref_freq_index,
        })
    }

    /// The default nine-channel, four-source Planck model with unit hit
    /// counts and unit prior scales for a face of `npix` pixels.
    pub fn planck_default(npix: usize) -> Result<Self> {
        let frequencies = PLANCK_FREQUENCIES_GHZ.to_vec();
        let a = build_mixing_matrix(
            &frequencies,
            KAPPA_SYNCHROTRON,
            KAPPA_DUST,
            DEFAULT_REF_INDEX,
        )?;
        Self::new(
            frequencies,
            a,
            default_t(),
            vec![1.0; npix],
            vec![1.0; NUM_SOURCES],
            DEFAULT_REF_INDEX,
        )
    }

    /// Same mixing matrix as the default model but with every τ_k replaced
    /// by one scalar; useful for stress models where the noise term no
    /// longer dominates the prior.
    pub fn planck_with_uniform_t(npix: usize, tau: f64) -> Result<Self> {
        let base = Self::planck_default(npix)?;
        Self::new(
            base.frequencies.clone(),
            base.a.clone(),
            vec![tau; base.n()],
            base.nhits,
            base.p,
            base.ref_freq_index,
        )
    }

    /// Number of frequency channels n.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Number of sources m.
    pub fn m(&self) -> usize {
        self.a.ncols()
    }

    /// Number of pixels N this model's hit counts describe.
    pub fn npix(&self) -> usize {
        self.nhits.len()
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// The n×m mixing matrix A.
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Noise precision scales τ_k.
    pub fn t(&self) -> &[f64] {
        &self.t
    }

    /// Per-pixel hit counts n_j.
    pub fn nhits(&self) -> &[f64] {
        &self.nhits
    }

    /// Prior scales φ_l (diagonal of P).
    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn ref_freq_index(&self) -> usize {
        self.ref_freq_index
    }

    /// Replaces the hit counts (e.g. loaded from file), revalidating.
    pub fn with_nhits(self, nhits: Vec<f64>) -> Result<Self> {
        Self::new(
            self.frequencies,
            self.a,
            self.t,
            nhits,
            self.p,
            self.ref_freq_index,
        )
    }

    /// Replaces the prior scales φ_l, revalidating.
    pub fn with_p(self, p: Vec<f64>) -> Result<Self> {
        Self::new(
            self.frequencies,
            self.a,
            self.t,
            self.nhits,
            p,
            self.ref_freq_index,
        )
    }

    /// AᵀTA, the m×m channel-collapsed noise precision.
    pub fn at_t_a(&self) -> DMatrix<f64> {
        let mut ta = self.a.clone();
        for k in 0..self.n() {
            for l in 0..self.m() {
                ta[(k, l)] *= self.t[k];
            }
        }
        self.a.transpose() * ta
    }
}

/// Assembles the right-hand side reshape(BᵀC𝒴) = Nhits ⊙ (Y·T·A), an N×m
/// stack, from the N×n observation stack Y.
pub fn build_rhs(model: &ModelSpec, y: &MapStack) -> Result<MapStack> {
    if y.cols() != model.n() {
        return Err(Error::Shape(format!(
            "observations have {} columns, model has {} channels",
            y.cols(),
            model.n()
        )));
    }
    y.check_rows(model.npix())?;
    let mut ta = model.a().clone();
    for k in 0..model.n() {
        for l in 0..model.m() {
            ta[(k, l)] *= model.t()[k];
        }
    }
    let mut rhs = y.mul_small(&ta)?;
    rhs.scale_rows(model.nhits())?;
    Ok(rhs)
}
