use serde::{Deserialize, Serialize};

use super::model::{contextualize, denoise};
use super::schedule::NoiseSchedule;
use super::sequence::EmbeddingSequence;
use super::{TwoTowerConfig, TwoTowerParams};
use crate::error::{ensure, Error, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Reverse steps, evenly spaced over the schedule.
    pub steps: usize,
    /// `g` in `(1+g)·cond − g·uncond`.
    pub guidance_scale: f64,
    /// 0 is the deterministic update; 1 injects the full posterior noise.
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            guidance_scale: 0.0,
            eta: 0.0,
        }
    }
}

/// `k` schedule indices from the noisiest (`steps − 1`) down to the cleanest (`0`).
pub fn sampling_timesteps(schedule_steps: usize, k: usize) -> Vec<usize> {
    let last = schedule_steps - 1;
    if k <= 1 {
        return vec![last];
    }
    let k = k.min(schedule_steps);
    (0..k)
        .map(|j| last - ((j * last) as f64 / (k - 1) as f64).round() as usize)
        .collect()
}

/// Classifier-free-guided prediction of the clean embedding.
pub fn guided_denoise(
    params: &TwoTowerParams,
    cfg: &TwoTowerConfig,
    xt: &[f64],
    log_snr: f64,
    c: &[f64],
    guidance_scale: f64,
) -> Result<Vec<f64>> {
    let cond = denoise(params, cfg, xt, log_snr, c, true)?;
    if guidance_scale == 0.0 {
        return Ok(cond);
    }
    let uncond = denoise(params, cfg, xt, log_snr, c, false)?;
    let g = guidance_scale;
    Ok(cond.iter().zip(&uncond).map(|(a, b)| (1.0 + g) * a - g * b).collect())
}

/// Draws the embedding that follows `prefix`, starting from `x_T ~ N(0, I)`.
pub fn sample_next(
    params: &TwoTowerParams,
    cfg: &TwoTowerConfig,
    prefix: &EmbeddingSequence,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    ensure(sampler.guidance_scale >= 0.0, || {
        format!("guidance_scale must be >= 0, got {}", sampler.guidance_scale)
    })?;
    ensure((0.0..=1.0).contains(&sampler.eta), || format!("eta must lie in [0, 1], got {}", sampler.eta))?;
    let ctx = contextualize(params, cfg, prefix)?;
    let c = ctx.row(ctx.rows() - 1).to_vec();
    let ts = sampling_timesteps(schedule.steps, sampler.steps);
    let mut x = rng.gaussian_vec(cfg.concept_dim);
    let mut x0_hat = Vec::new();
    for (j, &t) in ts.iter().enumerate() {
        x0_hat = guided_denoise(params, cfg, &x, schedule.log_snr[t], &c, sampler.guidance_scale)?;
        let Some(&next) = ts.get(j + 1) else { break };
        let (a_t, s_t) = (schedule.alpha[t], schedule.sigma[t]);
        if s_t == 0.0 {
            return Err(Error::NonFinite(format!("sigma is zero at intermediate step {t}")));
        }
        let (a_n, s_n) = (schedule.alpha[next], schedule.sigma[next]);
        let eps_hat: Vec<f64> = x.iter().zip(&x0_hat).map(|(xt, x0)| (xt - a_t * x0) / s_t).collect();
        let var = if sampler.eta > 0.0 {
            let ratio = (a_t * s_n / (a_n * s_t)).powi(2);
            (sampler.eta.powi(2) * s_n * s_n * (1.0 - ratio)).max(0.0)
        } else {
            0.0
        };
        let keep = (s_n * s_n - var).max(0.0).sqrt();
        let z = if var > 0.0 {
            rng.gaussian_vec(cfg.concept_dim)
        } else {
            vec![0.0; cfg.concept_dim]
        };
        let sd = var.sqrt();
        x = x0_hat
            .iter()
            .zip(&eps_hat)
            .zip(&z)
            .map(|((x0, e), zz)| a_n * x0 + keep * e + sd * zz)
            .collect();
    }
    Ok(x0_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latentdiff::{build_schedule, init_two_tower};
    use crate::numerics::gaussian_sample;

    #[test]
    fn timesteps_span_the_schedule() {
        assert_eq!(sampling_timesteps(100, 1), vec![99]);
        assert_eq!(sampling_timesteps(100, 2), vec![99, 0]);
        assert_eq!(sampling_timesteps(10, 4), vec![9, 6, 3, 0]);
        assert_eq!(sampling_timesteps(5, 50), vec![4, 3, 2, 1, 0]);
    }

    fn setup() -> (TwoTowerConfig, TwoTowerParams, EmbeddingSequence, NoiseSchedule) {
        let cfg = TwoTowerConfig {
            concept_dim: 3,
            ctx_layers: 1,
            ctx_width: 4,
            ctx_heads: 2,
            ff_mult: 1,
            den_depth: 1,
            den_width: 8,
            time_dim: 4,
            modality_tags: false,
        };
        let mut rng = SeededRng::new(4);
        let mut p = init_two_tower(&cfg, &mut rng).unwrap();
        p.null_ctx = gaussian_sample(&mut rng, 1, 4, 0.0, 1.0);
        let prefix = EmbeddingSequence::new(gaussian_sample(&mut rng, 2, 3, 0.0, 1.0));
        (cfg, p, prefix, build_schedule(30, 10.0, -10.0).unwrap())
    }

    #[test]
    fn single_step_is_guided_denoise_of_noise() {
        let (cfg, p, prefix, s) = setup();
        let sampler = SamplerConfig { steps: 1, guidance_scale: 1.5, eta: 0.0 };
        let out = sample_next(&p, &cfg, &prefix, &s, &sampler, &mut SeededRng::new(9)).unwrap();
        let noise = SeededRng::new(9).gaussian_vec(3);
        let c = contextualize(&p, &cfg, &prefix).unwrap();
        let expect = guided_denoise(&p, &cfg, &noise, s.log_snr[29], c.row(1), 1.5).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn zero_guidance_is_conditional_only() {
        let (cfg, p, prefix, s) = setup();
        let c = contextualize(&p, &cfg, &prefix).unwrap();
        let x = [0.1, 0.2, 0.3];
        assert_eq!(
            guided_denoise(&p, &cfg, &x, 0.5, c.row(1), 0.0).unwrap(),
            denoise(&p, &cfg, &x, 0.5, c.row(1), true).unwrap()
        );
        let sampler = SamplerConfig { steps: 5, ..SamplerConfig::default() };
        let a = sample_next(&p, &cfg, &prefix, &s, &sampler, &mut SeededRng::new(1)).unwrap();
        let b = sample_next(&p, &cfg, &prefix, &s, &sampler, &mut SeededRng::new(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_negative_guidance() {
        let (cfg, p, prefix, s) = setup();
        let sampler = SamplerConfig { guidance_scale: -1.0, ..SamplerConfig::default() };
        assert!(sample_next(&p, &cfg, &prefix, &s, &sampler, &mut SeededRng::new(1)).is_err());
    }
}
