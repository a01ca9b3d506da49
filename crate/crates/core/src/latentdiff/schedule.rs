use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Variance-preserving schedule indexed from `0` (near clean) to `steps − 1` (near pure noise).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `λ_t = log(α_t² / σ_t²)`
    pub log_snr: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub lambda_max: f64,
    pub lambda_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lambda_max: 10.0,
            lambda_min: -10.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.lambda_max, self.lambda_min)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `λ` linearly spaced from `lambda_max` to `lambda_min`; `α = sigmoid(λ)^½`, `σ = sigmoid(−λ)^½`.
pub fn build_schedule(steps: usize, lambda_max: f64, lambda_min: f64) -> Result<NoiseSchedule> {
    ensure(steps >= 2, || format!("a schedule needs at least 2 steps, got {steps}"))?;
    ensure(lambda_max.is_finite() && lambda_min.is_finite(), || {
        "log-SNR endpoints must be finite".into()
    })?;
    ensure(lambda_max > lambda_min, || {
        format!("log-SNR must decrease: lambda_max {lambda_max} <= lambda_min {lambda_min}")
    })?;
    let span = lambda_max - lambda_min;
    let log_snr: Vec<f64> = (0..steps)
        .map(|t| lambda_max - span * t as f64 / (steps - 1) as f64)
        .collect();
    let alpha = log_snr.iter().map(|&l| sigmoid(l).sqrt()).collect();
    let sigma = log_snr.iter().map(|&l| sigmoid(-l).sqrt()).collect();
    Ok(NoiseSchedule {
        steps,
        alpha,
        sigma,
        log_snr,
    })
}

impl NoiseSchedule {
    pub fn check_index(&self, t: usize) -> Result<()> {
        if t < self.steps {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "timestep {t} outside schedule of {} steps",
                self.steps
            )))
        }
    }
}

/// A noised sample as constructed by [`forward_diffuse`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub x0: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub xt: Vec<f64>,
}

/// `x_t = α_t·x0 + σ_t·ε`.
pub fn forward_diffuse(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_index(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("x0 has {} entries, eps {}", x0.len(), eps.len())));
    }
    let (a, s) = (schedule.alpha[t], schedule.sigma[t]);
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

impl DiffusionState {
    pub fn new(x0: Vec<f64>, t: usize, eps: Vec<f64>, schedule: &NoiseSchedule) -> Result<Self> {
        let xt = forward_diffuse(&x0, t, &eps, schedule)?;
        Ok(Self { x0, t, eps, xt })
    }
}
