use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::AlignConfig;

/// Warmup-then-cosine multiplier in `[0, 1]`: linear `0 → 1` over `warmup`
/// steps, then `0.5·(1 + cos(π·progress))` down to zero at `total`.
pub fn warmup_cosine_factor(step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    if span == 0 {
        return 1.0;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * (1.0 + (PI * progress).cos())
}

/// `(lr_projector, lr_encoder_adapter)` at `step` of `total_steps`.
///
/// The adapter rate is zero while `step < freeze_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &AlignConfig) -> Result<(f64, f64)> {
    lr_at(step, total_steps, step, cfg)
}

/// Like [`lr_schedule`] but with the freeze measured on a separate (curriculum-global) step.
pub(crate) fn lr_at(step: usize, total_steps: usize, global_step: usize, cfg: &AlignConfig) -> Result<(f64, f64)> {
    if total_steps < cfg.warmup_steps {
        return Err(Error::InvalidArgument(format!(
            "total_steps {total_steps} is shorter than warmup_steps {}",
            cfg.warmup_steps
        )));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} is past total_steps {total_steps}"
        )));
    }
    let f = warmup_cosine_factor(step, cfg.warmup_steps, total_steps);
    let enc = if global_step < cfg.freeze_steps {
        0.0
    } else {
        cfg.lr_encoder_adapter * f
    };
    Ok((cfg.lr_projector * f, enc))
}
