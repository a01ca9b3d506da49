//! Deterministic stand-in for a frozen vision backbone and a frozen text encoder.
//!
//! A finite caption bank lives in the concept space. A video for caption `z`
//! is a stack of `T` frames `W·z + δ_t + noise`, where `W` is a fixed mixing
//! matrix and `δ_t` a fixed per-position offset.

use serde::{Deserialize, Serialize};

use super::{Dataset, PairedSample};
use crate::error::{ensure, Result};
use crate::numerics::{gaussian_sample, norm, Matrix, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    /// Frame feature width `D`.
    pub frame_dim: usize,
    /// Concept width `d`.
    pub concept_dim: usize,
    /// Frames per video `T`.
    pub frames: usize,
    pub noise_sigma: f64,
    pub bank_size: usize,
    pub drift_scale: f64,
    /// Caption embedding norms are drawn uniformly from this range.
    pub norm_range: (f64, f64),
    /// Optional per-position multiplier on `noise_sigma`; empty means uniform.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise_profile: Vec<f64>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            frame_dim: 64,
            concept_dim: 32,
            frames: 8,
            noise_sigma: 0.1,
            bank_size: 512,
            drift_scale: 0.5,
            norm_range: (0.5, 2.0),
            noise_profile: Vec::new(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.frame_dim > 0 && self.concept_dim > 0, || {
            "frame and concept dimensions must be positive".into()
        })?;
        ensure(self.frames >= 1, || "a video needs at least one frame".into())?;
        ensure(self.noise_sigma >= 0.0, || "noise_sigma must be non-negative".into())?;
        ensure(self.bank_size >= 1, || "caption bank must be nonempty".into())?;
        let (lo, hi) = self.norm_range;
        ensure(0.0 < lo && lo <= hi, || format!("bad norm range ({lo}, {hi})"))?;
        ensure(
            self.noise_profile.is_empty() || self.noise_profile.len() == self.frames,
            || {
                format!(
                    "noise_profile has {} entries for {} frames",
                    self.noise_profile.len(),
                    self.frames
                )
            },
        )?;
        Ok(())
    }

    fn noise_at(&self, t: usize) -> f64 {
        self.noise_sigma * self.noise_profile.get(t).copied().unwrap_or(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    /// D×d
    pub mixing: Matrix,
    /// T×D; row 0 is all zeros.
    pub drift: Matrix,
    /// bank_size×d; row index is the caption id.
    pub caption_bank: Matrix,
}

impl SyntheticWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derive(config.seed, 0);
        let (dd, d) = (config.frame_dim, config.concept_dim);
        let mixing = gaussian_sample(&mut rng, dd, d, 0.0, 1.0 / (d as f64).sqrt());
        let caption_bank = random_bank(&mut rng, config.bank_size, d, config.norm_range);
        let drift = drift_offsets(config.frames, dd, config.drift_scale);
        Ok(Self {
            config,
            mixing,
            drift,
            caption_bank,
        })
    }

    /// A world with an explicit mixing matrix and caption bank.
    pub fn from_parts(config: WorldConfig, mixing: Matrix, caption_bank: Matrix) -> Result<Self> {
        let config = WorldConfig {
            bank_size: caption_bank.rows(),
            ..config
        };
        config.validate()?;
        ensure(mixing.shape() == (config.frame_dim, config.concept_dim), || {
            format!("mixing matrix is {:?}", mixing.shape())
        })?;
        ensure(caption_bank.cols() == config.concept_dim, || {
            "caption bank width differs from concept_dim".into()
        })?;
        let drift = drift_offsets(config.frames, config.frame_dim, config.drift_scale);
        Ok(Self {
            config,
            mixing,
            drift,
            caption_bank,
        })
    }

    /// Frames for caption embedding `z`, with noise from `rng`.
    pub fn render(&self, z: &[f64], rng: &mut SeededRng) -> Matrix {
        let cfg = &self.config;
        let clean: Vec<f64> = (0..cfg.frame_dim)
            .map(|r| self.mixing.row(r).iter().zip(z).map(|(w, x)| w * x).sum())
            .collect();
        let mut frames = Matrix::zeros(cfg.frames, cfg.frame_dim);
        for t in 0..cfg.frames {
            let sigma = cfg.noise_at(t);
            let row = frames.row_mut(t);
            for (k, v) in row.iter_mut().enumerate() {
                *v = clean[k] + self.drift.get(t, k);
                if sigma > 0.0 {
                    *v += sigma * rng.gaussian();
                }
            }
        }
        frames
    }
}

/// Rows with uniformly random directions and norms uniform in `range`.
pub fn random_bank(rng: &mut SeededRng, n: usize, d: usize, range: (f64, f64)) -> Matrix {
    let mut bank = Matrix::zeros(n, d);
    for i in 0..n {
        let mut dir = rng.gaussian_vec(d);
        let mut nrm = norm(&dir);
        while nrm == 0.0 {
            dir = rng.gaussian_vec(d);
            nrm = norm(&dir);
        }
        let target = range.0 + (range.1 - range.0) * rng.uniform();
        for (b, x) in bank.row_mut(i).iter_mut().zip(&dir) {
            *b = x / nrm * target;
        }
    }
    bank
}

fn drift_offsets(frames: usize, dim: usize, scale: f64) -> Matrix {
    let mut drift = Matrix::zeros(frames, dim);
    for t in 0..frames {
        for k in 0..dim {
            let freq = 0.3 + 0.9 * (k as f64 + 1.0) / dim as f64;
            drift.set(t, k, scale * (t as f64 * freq).sin());
        }
    }
    drift
}

/// Draws `n` samples: a uniform caption id, its bank embedding as target, and rendered frames.
pub fn gen_synthetic_pairs(world: &SyntheticWorld, n: usize, rng: &mut SeededRng) -> Result<Dataset> {
    ensure(n >= 1, || "need at least one sample".into())?;
    let bank = &world.caption_bank;
    let samples = (0..n)
        .map(|_| {
            let id = rng.below(bank.rows());
            let target = bank.row(id).to_vec();
            let frames = world.render(&target, rng);
            PairedSample {
                frames,
                target,
                caption_id: id as u64,
            }
        })
        .collect();
    Ok(Dataset {
        frame_dim: world.config.frame_dim,
        concept_dim: world.config.concept_dim,
        frames_per_sample: world.config.frames,
        samples,
    })
}
