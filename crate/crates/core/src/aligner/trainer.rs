use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::combined_loss;
use super::schedule::lr_at;
use super::AlignConfig;
use crate::corpus::{CurriculumStage, Dataset};
use crate::error::{ensure, Error, Result};
use crate::nn::{AdamW, Parameters};
use crate::numerics::{cosine_similarity, Matrix, SeededRng};
use crate::projector::{project, project_backward, ProjectorConfig, ProjectorParams};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const SHUFFLE_STREAM: u64 = 1 << 32;
const DROPOUT_STREAM: u64 = 2 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Encoder adapter frozen; projector only.
    Frozen,
    Joint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Frozen => "frozen",
            Phase::Joint => "joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    pub lr_proj: f64,
    pub lr_enc: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_mse: f64,
    pub val_cos: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub stage: String,
    /// Validation metrics of the parameters the stage started from.
    pub initial_val_mse: f64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (1-based).
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_mse(&self) -> f64 {
        self.epochs
            .iter()
            .map(|e| e.val_mse)
            .fold(f64::INFINITY, f64::min)
    }

    /// Writes `step,phase,lr_proj,lr_enc,loss`.
    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["step", "phase", "lr_proj", "lr_enc", "loss"])
            .map_err(|e| Error::csv(path, e))?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.phase.as_str().to_string(),
                format!("{:e}", s.lr_proj),
                format!("{:e}", s.lr_enc),
                format!("{:e}", s.loss),
            ])
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes `epoch,val_mse,val_cos`.
    pub fn write_epochs_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["epoch", "val_mse", "val_cos"])
            .map_err(|e| Error::csv(path, e))?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:e}", e.val_mse),
                format!("{:e}", e.val_cos),
            ])
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records a validation value; returns `(improved, should_stop)`.
    pub fn update(&mut self, value: f64) -> (bool, bool) {
        if value < self.best {
            self.best = value;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }
}

/// Projects every sample in evaluation mode; returns the n×d student embeddings.
pub fn embed_dataset(params: &ProjectorParams, pcfg: &ProjectorConfig, data: &Dataset) -> Result<Matrix> {
    let mut out = Matrix::zeros(data.len(), pcfg.concept_dim);
    for (i, s) in data.samples.iter().enumerate() {
        let (z, _) = project(params, pcfg, &s.frames, false, None)?;
        out.row_mut(i).copy_from_slice(&z);
    }
    Ok(out)
}

/// Mean squared distance and mean cosine between student and teacher embeddings.
pub fn validation_metrics(params: &ProjectorParams, pcfg: &ProjectorConfig, data: &Dataset) -> Result<(f64, f64)> {
    ensure(!data.is_empty(), || "validation set is empty".into())?;
    let zv = embed_dataset(params, pcfg, data)?;
    let (mut mse, mut cos) = (0.0, 0.0);
    for (i, s) in data.samples.iter().enumerate() {
        let z = zv.row(i);
        mse += z.iter().zip(&s.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        // A zero embedding (e.g. all-zero parameters) has no direction; count it as cosine 0.
        cos += cosine_similarity(z, &s.target).unwrap_or(0.0);
    }
    let n = data.len() as f64;
    Ok((mse / n, cos / n))
}

/// Per-stage settings layered over the base [`AlignConfig`].
#[derive(Clone, Debug)]
pub(crate) struct StageRun<'a> {
    pub name: &'a str,
    pub cfg: AlignConfig,
    /// Steps already taken by earlier curriculum stages.
    pub global_offset: usize,
}

/// Trains the projector on `train`, early-stopping on `val` MSE.
///
/// Returns the parameters from the best validation epoch.
pub fn train_stage(
    train: &Dataset,
    val: &Dataset,
    params: ProjectorParams,
    pcfg: &ProjectorConfig,
    cfg: &AlignConfig,
) -> Result<(ProjectorParams, TrainHistory)> {
    let run = StageRun {
        name: "stage",
        cfg: cfg.clone(),
        global_offset: 0,
    };
    train_stage_run(train, val, params, pcfg, &run).map(|(p, h, _)| (p, h))
}

pub(crate) fn train_stage_run(
    train: &Dataset,
    val: &Dataset,
    mut params: ProjectorParams,
    pcfg: &ProjectorConfig,
    run: &StageRun<'_>,
) -> Result<(ProjectorParams, TrainHistory, usize)> {
    let cfg = &run.cfg;
    cfg.validate()?;
    pcfg.validate()?;
    ensure(!train.is_empty(), || "training set is empty".into())?;
    ensure(!val.is_empty(), || "validation set is empty".into())?;
    ensure(train.frame_dim == pcfg.frame_dim && train.concept_dim == pcfg.concept_dim, || {
        format!(
            "dataset dims (D={}, d={}) do not match the projector (D={}, d={})",
            train.frame_dim, train.concept_dim, pcfg.frame_dim, pcfg.concept_dim
        )
    })?;

    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.max_epochs * batches_per_epoch).max(cfg.warmup_steps);
    let mut opt = AdamW::new(ADAM_BETA1, ADAM_BETA2, ADAM_EPS, cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainHistory {
        stage: run.name.to_string(),
        initial_val_mse: validation_metrics(&params, pcfg, val)?.0,
        ..TrainHistory::default()
    };
    let mut best = params.clone();
    let mut step = 0usize;

    for epoch in 0..cfg.max_epochs {
        let order = SeededRng::derive(cfg.seed, SHUFFLE_STREAM | (run.global_offset + epoch) as u64)
            .permutation(train.len());
        for batch in order.chunks(cfg.batch_size) {
            let global = run.global_offset + step;
            let (lr_proj, lr_enc) = lr_at(step, total_steps, global, cfg)?;
            let mut rng = SeededRng::derive(cfg.seed, DROPOUT_STREAM | global as u64);

            let mut zv = Matrix::zeros(batch.len(), pcfg.concept_dim);
            let mut zt = Matrix::zeros(batch.len(), pcfg.concept_dim);
            let mut traces = Vec::with_capacity(batch.len());
            for (r, &i) in batch.iter().enumerate() {
                let s = &train.samples[i];
                let (z, tr) = project(&params, pcfg, &s.frames, true, Some(&mut rng))?;
                zv.row_mut(r).copy_from_slice(&z);
                zt.row_mut(r).copy_from_slice(&s.target);
                traces.push(tr);
            }
            let out = combined_loss(&zv, &zt, cfg)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    step: global as u64,
                    loss: out.loss,
                });
            }
            let mut grads = params.zeros_like();
            for (r, tr) in traces.iter().enumerate() {
                let (g, _) = project_backward(&params, tr, out.grad.row(r))?;
                grads.axpy(1.0, &g);
            }
            opt.step(
                &mut params,
                &grads,
                |name| {
                    if ProjectorParams::is_encoder_tensor(name) {
                        lr_enc
                    } else {
                        lr_proj
                    }
                },
                |name| !name.ends_with("bias"),
            );
            if !params.all_finite() {
                return Err(Error::Diverged {
                    step: global as u64,
                    loss: out.loss,
                });
            }
            history.steps.push(StepRecord {
                step: global as u64,
                phase: if global < cfg.freeze_steps {
                    Phase::Frozen
                } else {
                    Phase::Joint
                },
                lr_proj,
                lr_enc,
                loss: out.loss,
            });
            step += 1;
        }

        let (val_mse, val_cos) = validation_metrics(&params, pcfg, val)?;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            val_mse,
            val_cos,
        });
        let (improved, stop) = stopper.update(val_mse);
        if improved {
            best = params.clone();
            history.best_epoch = epoch + 1;
        }
        if stop {
            break;
        }
    }
    Ok((best, history, step))
}

/// A curriculum stage with its data already loaded and split.
#[derive(Clone, Debug)]
pub struct StageData {
    pub stage: CurriculumStage,
    pub train: Dataset,
    pub val: Dataset,
}

/// Runs the stages in order. Parameters carry over; optimizer state does not.
pub fn run_curriculum(
    stages: &[StageData],
    init: ProjectorParams,
    pcfg: &ProjectorConfig,
    cfg: &AlignConfig,
) -> Result<(ProjectorParams, Vec<TrainHistory>)> {
    run_curriculum_with(stages, init, pcfg, cfg, |_, _, _| Ok(()))
}

/// As [`run_curriculum`], calling `after_stage(index, best params, history)` as each stage ends.
pub fn run_curriculum_with(
    stages: &[StageData],
    init: ProjectorParams,
    pcfg: &ProjectorConfig,
    cfg: &AlignConfig,
    mut after_stage: impl FnMut(usize, &ProjectorParams, &TrainHistory) -> Result<()>,
) -> Result<(ProjectorParams, Vec<TrainHistory>)> {
    ensure(!stages.is_empty(), || "curriculum has no stages".into())?;
    let mut params = init;
    let mut histories = Vec::with_capacity(stages.len());
    let mut offset = 0;
    for sd in stages {
        sd.stage.validate()?;
        let run = StageRun {
            name: &sd.stage.name,
            cfg: cfg.for_stage(&sd.stage),
            global_offset: offset,
        };
        let (p, h, steps) = train_stage_run(&sd.train, &sd.val, params, pcfg, &run)?;
        after_stage(histories.len(), &p, &h)?;
        params = p;
        offset += steps;
        histories.push(h);
    }
    Ok((params, histories))
}
