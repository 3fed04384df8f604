//! Deterministic simulation of source maps and observations: S is drawn
//! iid Normal(0, source_std²) and Y = S·Aᵀ + E with per-pixel noise standard
//! deviation 1/√(τ_k·n_j).
//!
//! Reproducibility contract: the generator is ChaCha8 seeded with the
//! configured 64-bit seed, one independent stream per output column
//! (streams 0..m for S, m..m+n for the noise), and normal variates come
//! from a fixed Box–Muller transform, so equal seeds give bitwise-equal
//! stacks on every platform and thread count.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::grid::SkyGrid;
use crate::model::ModelSpec;
use crate::{Error, MapStack, Result};

/// Simulation protocol parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub level: u32,
    /// Source count; must match the model.
    pub m: usize,
    /// Channel count; must match the model.
    pub n: usize,
    pub seed: u64,
    /// Standard deviation of the simulated source amplitudes.
    pub source_std: f64,
    /// Disables observation noise, leaving the exact forward model Y = S·Aᵀ.
    pub noiseless: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            level: 3,
            m: 4,
            n: 9,
            seed: 0,
            source_std: 1.0,
            noiseless: false,
        }
    }
}

impl SimConfig {
    pub fn new(level: u32) -> Self {
        Self {
            level,
            ..Self::default()
        }
    }
}

/// A stream of standard normal variates: uniforms from one ChaCha8 stream,
/// mapped in pairs through Box–Muller.
struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * SCALE;
        let u2 = (self.rng.next_u64() >> 11) as f64 * SCALE;
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// Draws the true sources and the observations for the given grid and model.
pub fn simulate(
    cfg: &SimConfig,
    grid: &SkyGrid,
    model: &ModelSpec,
) -> Result<(MapStack, MapStack)> {
    if cfg.level != grid.level() {
        return Err(Error::Config(format!(
            "config level {} does not match grid level {}",
            cfg.level,
            grid.level()
        )));
    }
    if cfg.m != model.m() || cfg.n != model.n() {
        return Err(Error::Config(format!(
            "config asks for {}x{} sources/channels, model has {}x{}",
            cfg.m,
            cfg.n,
            model.m(),
            model.n()
        )));
    }
    if model.npix() != grid.npix() {
        return Err(Error::Shape(format!(
            "model describes {} pixels, grid has {}",
            model.npix(),
            grid.npix()
        )));
    }
    if !(cfg.source_std >= 0.0) || !cfg.source_std.is_finite() {
        return Err(Error::Config(format!(
            "source_std must be finite and nonnegative, got {}",
            cfg.source_std
        )));
    }
    let npix = grid.npix();
    let (m, n) = (cfg.m, cfg.n);

    let mut s_true = MapStack::zeros(npix, m);
    for l in 0..m {
        let mut stream = NormalStream::new(cfg.seed, l as u64);
        for v in s_true.col_mut(l) {
            *v = cfg.source_std * stream.next_normal();
        }
    }

    let mut y = s_true.mul_small(&model.a().transpose())?;
    if !cfg.noiseless {
        for k in 0..n {
            let mut stream = NormalStream::new(cfg.seed, (m + k) as u64);
            let tau = model.t()[k];
            let col = y.col_mut(k);
            for (j, v) in col.iter_mut().enumerate() {
                *v += stream.next_normal() / (tau * model.nhits()[j]).sqrt();
            }
        }
    }
    Ok((s_true, y))
}
