use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::loss::diffusion_loss;
use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::sequence::DiffusionItem;
use super::{TwoTowerConfig, TwoTowerParams};
use crate::error::{ensure, Error, Result};
use crate::nn::{clip_grad_norm, AdamW, Moments, Parameters};
use crate::numerics::SeededRng;

const BATCH_STREAM: u64 = 1 << 32;
const VAL_STREAM: u64 = 3 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct LcmTrainConfig {
    /// Probability of replacing the context with the null context.
    pub guidance_p: f64,
    pub lr: f64,
    pub warmup: usize,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Validation and checkpoint cadence in steps.
    pub ckpt_every: usize,
    /// Train on `‖·‖²` instead of `‖·‖`.
    pub squared_loss: bool,
    pub schedule: ScheduleConfig,
}

impl Default for LcmTrainConfig {
    fn default() -> Self {
        Self {
            guidance_p: 0.15,
            lr: 3e-5,
            warmup: 300,
            final_lr: 1e-6,
            weight_decay: 0.01,
            adam_eps: 1e-6,
            grad_clip: 25.0,
            max_steps: 10_000,
            seed: 0,
            batch_size: 16,
            ckpt_every: 1000,
            squared_loss: false,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl LcmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure((0.0..1.0).contains(&self.guidance_p), || {
            format!("guidance_p must lie in [0, 1), got {}", self.guidance_p)
        })?;
        ensure(self.lr > 0.0 && (0.0..=self.lr).contains(&self.final_lr), || {
            format!("need 0 <= final_lr <= lr, lr > 0 (lr {}, final_lr {})", self.lr, self.final_lr)
        })?;
        ensure(self.max_steps >= 1 && self.warmup <= self.max_steps, || {
            format!("warmup {} must not exceed max_steps {}", self.warmup, self.max_steps)
        })?;
        ensure(self.batch_size >= 1 && self.ckpt_every >= 1, || {
            "batch_size and ckpt_every must be >= 1".into()
        })?;
        ensure(self.grad_clip > 0.0 && self.adam_eps > 0.0 && self.weight_decay >= 0.0, || {
            "grad_clip and adam_eps must be positive, weight_decay non-negative".into()
        })
    }
}

/// Rate for the `step`-th update (1-based): linear `0 → lr` over `warmup`, then cosine `lr → final_lr`.
pub fn lcm_lr(step: usize, cfg: &LcmTrainConfig) -> f64 {
    if cfg.warmup > 0 && step <= cfg.warmup {
        return cfg.lr * (step as f64 / cfg.warmup as f64);
    }
    let span = cfg.max_steps.saturating_sub(cfg.warmup).max(1);
    let progress = (step.saturating_sub(cfg.warmup) as f64 / span as f64).min(1.0);
    cfg.final_lr + (cfg.lr - cfg.final_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LcmStepRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean over the batch.
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub dropped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LcmValRecord {
    pub step: usize,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LcmHistory {
    pub steps: Vec<LcmStepRecord>,
    pub val: Vec<LcmValRecord>,
}

impl LcmHistory {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["step", "lr", "loss", "grad_norm", "clipped_norm", "dropped"])
            .map_err(|e| Error::csv(path, e))?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                format!("{:e}", s.lr),
                format!("{:e}", s.loss),
                format!("{:e}", s.grad_norm),
                format!("{:e}", s.clipped_norm),
                s.dropped.to_string(),
            ])
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes `step,val_loss`, one line per checkpoint boundary.
    pub fn write_val_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["step", "val_loss"]).map_err(|e| Error::csv(path, e))?;
        for v in &self.val {
            w.write_record([v.step.to_string(), format!("{:e}", v.val_loss)])
                .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct LcmState {
    /// Updates completed so far.
    pub step: usize,
    pub params: TwoTowerParams,
    pub best: TwoTowerParams,
    pub best_val: Option<f64>,
    pub best_step: usize,
    pub moments: Vec<Moments>,
    pub history: LcmHistory,
}

impl LcmState {
    pub fn fresh(init: TwoTowerParams) -> Self {
        Self {
            step: 0,
            best: init.clone(),
            params: init,
            best_val: None,
            best_step: 0,
            moments: Vec::new(),
            history: LcmHistory::default(),
        }
    }
}

pub struct LcmTrainer<'a> {
    items: &'a [DiffusionItem],
    val: &'a [DiffusionItem],
    model: TwoTowerConfig,
    cfg: LcmTrainConfig,
    schedule: NoiseSchedule,
    opt: AdamW,
    state: LcmState,
}

impl<'a> LcmTrainer<'a> {
    /// `val` may be empty, in which case training items stand in for validation.
    pub fn new(
        items: &'a [DiffusionItem],
        val: &'a [DiffusionItem],
        model: TwoTowerConfig,
        cfg: LcmTrainConfig,
        state: LcmState,
    ) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        ensure(!items.is_empty(), || "no training items".into())?;
        ensure(state.step <= cfg.max_steps, || {
            format!("state is at step {} past max_steps {}", state.step, cfg.max_steps)
        })?;
        let schedule = cfg.schedule.build()?;
        let mut opt = AdamW::new(0.9, 0.999, cfg.adam_eps, cfg.weight_decay);
        opt.restore_moments(state.moments.clone());
        Ok(Self {
            items,
            val,
            model,
            cfg,
            schedule,
            opt,
            state,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.cfg.max_steps
    }

    /// Current state with the optimizer moments folded in.
    pub fn snapshot(&self) -> LcmState {
        LcmState {
            moments: self.opt.moments().to_vec(),
            ..self.state.clone()
        }
    }

    pub fn into_state(self) -> LcmState {
        LcmState {
            moments: self.opt.moments().to_vec(),
            ..self.state
        }
    }

    /// Mean reconstruction loss over the validation items under a fixed draw of steps and noise.
    pub fn validation_loss(&self, params: &TwoTowerParams) -> Result<f64> {
        let items = if self.val.is_empty() { self.items } else { self.val };
        let mut rng = SeededRng::derive(self.cfg.seed, VAL_STREAM);
        let (stats, _) = diffusion_loss(
            params,
            &self.model,
            items,
            &self.schedule,
            0.0,
            self.cfg.squared_loss,
            &mut rng,
        )?;
        Ok(stats.loss / items.len() as f64)
    }

    /// One update; returns `true` when a validation/checkpoint boundary was reached.
    pub fn step(&mut self) -> Result<bool> {
        let step = self.state.step + 1;
        let mut rng = SeededRng::derive(self.cfg.seed, BATCH_STREAM | step as u64);
        let batch: Vec<DiffusionItem> = (0..self.cfg.batch_size)
            .map(|_| self.items[rng.below(self.items.len())].clone())
            .collect();
        let (stats, mut grads) = diffusion_loss(
            &self.state.params,
            &self.model,
            &batch,
            &self.schedule,
            self.cfg.guidance_p,
            self.cfg.squared_loss,
            &mut rng,
        )?;
        let loss = stats.loss / stats.items as f64;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                step: step as u64,
                loss,
            });
        }
        let (grad_norm, clipped_norm) = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        let lr = lcm_lr(step, &self.cfg);
        self.opt.step(
            &mut self.state.params,
            &grads,
            |_| lr,
            |name| !name.ends_with("bias"),
        );
        self.state.step = step;
        self.state.history.steps.push(LcmStepRecord {
            step,
            lr,
            loss,
            grad_norm,
            clipped_norm,
            dropped: stats.dropped,
        });

        let boundary = step % self.cfg.ckpt_every == 0 || step == self.cfg.max_steps;
        if boundary {
            let val_loss = self.validation_loss(&self.state.params)?;
            self.state.history.val.push(LcmValRecord { step, val_loss });
            if self.state.best_val.is_none_or(|b| val_loss < b) {
                self.state.best_val = Some(val_loss);
                self.state.best_step = step;
                self.state.best = self.state.params.clone();
            }
        }
        Ok(boundary)
    }

    /// Trains to `max_steps`, handing the state to `on_boundary` at each checkpoint step.
    pub fn run(&mut self, mut on_boundary: impl FnMut(&LcmState) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            if self.step()? {
                on_boundary(&self.snapshot())?;
            }
        }
        Ok(())
    }
}

/// Result of a full run: best-validation parameters, final parameters and the history.
#[derive(Clone, Debug)]
pub struct LcmOutcome {
    pub best: TwoTowerParams,
    pub last: TwoTowerParams,
    pub best_step: usize,
    pub history: LcmHistory,
}

pub fn train_lcm(
    items: &[DiffusionItem],
    val: &[DiffusionItem],
    model: &TwoTowerConfig,
    cfg: &LcmTrainConfig,
    init: TwoTowerParams,
) -> Result<LcmOutcome> {
    let mut trainer = LcmTrainer::new(items, val, model.clone(), cfg.clone(), LcmState::fresh(init))?;
    trainer.run(|_| Ok(()))?;
    let st = trainer.into_state();
    Ok(LcmOutcome {
        best: st.best,
        last: st.params,
        best_step: st.best_step,
        history: st.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_endpoints() {
        let c = LcmTrainConfig::default();
        assert_eq!(lcm_lr(0, &c), 0.0);
        assert_eq!(lcm_lr(300, &c), 3e-5);
        assert_eq!(lcm_lr(150, &c), 1.5e-5);
        assert!((lcm_lr(10_000, &c) - 1e-6).abs() < 1e-12);
        let mid = lcm_lr(300 + 4850, &c);
        assert!((mid - (1e-6 + 0.5 * (3e-5 - 1e-6))).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(LcmTrainConfig { guidance_p: 1.0, ..LcmTrainConfig::default() }.validate().is_err());
        assert!(LcmTrainConfig { warmup: 20_000, ..LcmTrainConfig::default() }.validate().is_err());
        LcmTrainConfig::default().validate().unwrap();
        let c: LcmTrainConfig = serde_json::from_str(r#"{"lr": 1e-3, "schedule": {"steps": 50}}"#).unwrap();
        assert_eq!((c.lr, c.schedule.steps, c.schedule.lambda_max), (1e-3, 50, 10.0));
    }
}
