//! Teacher-student alignment: losses, learning-rate schedule, stage trainer and curriculum runner.

mod loss;
mod schedule;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::corpus::CurriculumStage;
use crate::error::{ensure, Result};

pub use loss::{combined_loss, infonce_loss, mse_align_loss, LossOutput};
pub use schedule::{lr_schedule, warmup_cosine_factor};
pub use trainer::{
    embed_dataset, run_curriculum, run_curriculum_with, train_stage, validation_metrics, EarlyStopping, EpochRecord, Phase, StageData,
    StepRecord, TrainHistory, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Weight of the contrastive term; 0 trains on MSE alone.
    pub lambda_con: f64,
    pub tau: f64,
    pub lr_projector: f64,
    pub lr_encoder_adapter: f64,
    pub freeze_steps: usize,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            lambda_con: 0.0,
            tau: 0.07,
            lr_projector: 1e-4,
            lr_encoder_adapter: 1e-5,
            freeze_steps: 200,
            warmup_steps: 50,
            max_epochs: 20,
            patience: 3,
            batch_size: 32,
            seed: 0,
            weight_decay: 0.01,
        }
    }
}

impl AlignConfig {
    /// Step counts for corpora in the millions of pairs.
    pub fn full_scale() -> Self {
        Self {
            freeze_steps: 2000,
            warmup_steps: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.lr_projector > 0.0 && self.lr_encoder_adapter > 0.0, || {
            format!(
                "learning rates must be positive (projector {}, encoder adapter {})",
                self.lr_projector, self.lr_encoder_adapter
            )
        })?;
        ensure(self.tau > 0.0, || format!("tau must be positive, got {}", self.tau))?;
        ensure(self.lambda_con >= 0.0 && self.lambda_con.is_finite(), || {
            format!("lambda_con must be finite and non-negative, got {}", self.lambda_con)
        })?;
        ensure(self.weight_decay >= 0.0, || {
            format!("weight_decay must be non-negative, got {}", self.weight_decay)
        })?;
        ensure(self.patience >= 1, || "patience must be >= 1".into())?;
        ensure(self.max_epochs >= 1, || "max_epochs must be >= 1".into())?;
        ensure(self.batch_size >= 1, || "batch_size must be >= 1".into())
    }

    /// This config with a curriculum stage's epochs, batch size and rate overrides applied.
    pub fn for_stage(&self, stage: &CurriculumStage) -> Self {
        let mut cfg = self.clone();
        cfg.max_epochs = stage.epochs;
        cfg.batch_size = stage.batch_size;
        if let Some(o) = &stage.lr_overrides {
            if let Some(lr) = o.lr_projector {
                cfg.lr_projector = lr;
            }
            if let Some(lr) = o.lr_encoder_adapter {
                cfg.lr_encoder_adapter = lr;
            }
            if let Some(w) = o.warmup_steps {
                cfg.warmup_steps = w;
            }
        }
        cfg
    }
}
