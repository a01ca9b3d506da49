//! Named-tensor checkpoints: `params.json` plus one f64 embedding file per tensor.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_embeddings, read_json, write_json, write_tensor};
use crate::error::{Error, Result};
use crate::latentdiff::{LcmHistory, LcmState, LcmTrainConfig, ScheduleConfig, TwoTowerConfig, TwoTowerParams};
use crate::nn::{Moments, Parameters};
use crate::numerics::Matrix;
use crate::projector::{ProjectorConfig, ProjectorParams};

pub const PARAMS_FILE: &str = "params.json";
pub const KIND_PROJECTOR: &str = "projector";
pub const KIND_TWO_TOWER: &str = "two_tower";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub seed: u64,
    pub step: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn tensor_file(name: &str) -> String {
    format!("{name}.bin")
}

fn to_value<T: Serialize>(dir: &Path, v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::json(dir, e))
}

fn write_tensors<'a>(dir: &Path, tensors: impl IntoIterator<Item = (String, &'a Matrix)>) -> Result<Vec<TensorEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tensors
        .into_iter()
        .map(|(name, t)| {
            let file = tensor_file(&name);
            write_tensor(dir.join(&file), t)?;
            Ok(TensorEntry {
                name,
                rows: t.rows(),
                cols: t.cols(),
                file,
            })
        })
        .collect()
}

pub fn save_params<P: Parameters, C: Serialize>(
    dir: &Path,
    kind: &str,
    config: &C,
    seed: u64,
    step: u64,
    params: &P,
) -> Result<()> {
    let tensors = write_tensors(dir, params.tensors())?;
    let meta = CheckpointMeta {
        kind: kind.to_string(),
        seed,
        step,
        config: to_value(dir, config)?,
        tensors,
    };
    write_json(&dir.join(PARAMS_FILE), &meta)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    read_json(&dir.join(PARAMS_FILE))
}

/// The stored config, parsed as `C`.
pub fn meta_config<C: DeserializeOwned>(dir: &Path, meta: &CheckpointMeta) -> Result<C> {
    serde_json::from_value(meta.config.clone()).map_err(|e| Error::json(dir.join(PARAMS_FILE), e))
}

/// Fills `template` tensor by tensor; names and shapes must match exactly.
pub fn load_into<P: Parameters>(dir: &Path, meta: &CheckpointMeta, template: &mut P) -> Result<()> {
    let mut slots = template.tensors_mut();
    if slots.len() != meta.tensors.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} tensors, the model expects {}",
            meta.tensors.len(),
            slots.len()
        )));
    }
    for ((name, slot), entry) in slots.iter_mut().zip(&meta.tensors) {
        if *name != entry.name {
            return Err(Error::Shape(format!("expected tensor {name}, checkpoint has {}", entry.name)));
        }
        let t = read_embeddings(dir.join(&entry.file))?;
        if t.shape() != slot.shape() || t.shape() != (entry.rows, entry.cols) {
            return Err(Error::Shape(format!(
                "tensor {name}: model {:?}, manifest {:?}, file {:?}",
                slot.shape(),
                (entry.rows, entry.cols),
                t.shape()
            )));
        }
        **slot = t;
    }
    Ok(())
}

fn check_kind(dir: &Path, meta: &CheckpointMeta, kind: &str) -> Result<()> {
    if meta.kind != kind {
        return Err(Error::Format {
            path: dir.join(PARAMS_FILE),
            msg: format!("checkpoint holds a {}, expected a {kind}", meta.kind),
        });
    }
    Ok(())
}

pub fn save_projector(dir: &Path, cfg: &ProjectorConfig, seed: u64, step: u64, params: &ProjectorParams) -> Result<()> {
    save_params(dir, KIND_PROJECTOR, cfg, seed, step, params)
}

pub fn load_projector(dir: &Path) -> Result<(ProjectorConfig, ProjectorParams, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    check_kind(dir, &meta, KIND_PROJECTOR)?;
    let cfg: ProjectorConfig = meta_config(dir, &meta)?;
    cfg.validate()?;
    let mut p = ProjectorParams::zeros(&cfg);
    load_into(dir, &meta, &mut p)?;
    Ok((cfg, p, meta))
}

/// What a two-tower checkpoint needs besides its tensors: the architecture and the noise schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoTowerMeta {
    pub model: TwoTowerConfig,
    pub schedule: ScheduleConfig,
}

pub fn save_two_tower(dir: &Path, meta: &TwoTowerMeta, seed: u64, step: u64, params: &TwoTowerParams) -> Result<()> {
    save_params(dir, KIND_TWO_TOWER, meta, seed, step, params)
}

pub fn load_two_tower(dir: &Path) -> Result<(TwoTowerMeta, TwoTowerParams, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    check_kind(dir, &meta, KIND_TWO_TOWER)?;
    let tm: TwoTowerMeta = meta_config(dir, &meta)?;
    tm.model.validate()?;
    let mut p = TwoTowerParams::zeros(&tm.model);
    load_into(dir, &meta, &mut p)?;
    Ok((tm, p, meta))
}

const BEST_DIR: &str = "best";
const MOMENTS_DIR: &str = "moments";
const MOMENTS_FILE: &str = "moments.json";
const STATE_FILE: &str = "state.json";
const HISTORY_FILE: &str = "history.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ResumeInfo {
    step: usize,
    best_val: Option<f64>,
    best_step: usize,
    train: LcmTrainConfig,
}

/// Writes everything needed to resume an LCM run: current and best parameters,
/// optimizer moments, progress counters and the history so far.
pub fn save_lcm_state(dir: &Path, model: &TwoTowerConfig, train: &LcmTrainConfig, state: &LcmState) -> Result<()> {
    let tm = TwoTowerMeta {
        model: model.clone(),
        schedule: train.schedule,
    };
    save_two_tower(dir, &tm, train.seed, state.step as u64, &state.params)?;
    save_two_tower(&dir.join(BEST_DIR), &tm, train.seed, state.best_step as u64, &state.best)?;
    let mdir = dir.join(MOMENTS_DIR);
    write_tensors(
        &mdir,
        state
            .moments
            .iter()
            .flat_map(|m| [(format!("m.{}", m.name), &m.m), (format!("v.{}", m.name), &m.v)]),
    )?;
    let entries: Vec<MomentEntry> = state
        .moments
        .iter()
        .map(|m| MomentEntry {
            name: m.name.clone(),
            steps: m.steps,
        })
        .collect();
    write_json(&mdir.join(MOMENTS_FILE), &entries)?;
    write_json(
        &dir.join(STATE_FILE),
        &ResumeInfo {
            step: state.step,
            best_val: state.best_val,
            best_step: state.best_step,
            train: train.clone(),
        },
    )?;
    write_json(&dir.join(HISTORY_FILE), &state.history)
}

pub fn load_lcm_state(dir: &Path) -> Result<(TwoTowerConfig, LcmTrainConfig, LcmState)> {
    let (tm, params, _) = load_two_tower(dir)?;
    let (best_meta, best, _) = load_two_tower(&dir.join(BEST_DIR))?;
    if best_meta != tm {
        return Err(Error::Format {
            path: dir.join(BEST_DIR),
            msg: "best checkpoint config differs from the current one".into(),
        });
    }
    let info: ResumeInfo = read_json(&dir.join(STATE_FILE))?;
    let history: LcmHistory = read_json(&dir.join(HISTORY_FILE))?;
    let mdir = dir.join(MOMENTS_DIR);
    let entries: Vec<MomentEntry> = read_json(&mdir.join(MOMENTS_FILE))?;
    let moments = entries
        .into_iter()
        .map(|e| {
            Ok(Moments {
                m: read_embeddings(mdir.join(tensor_file(&format!("m.{}", e.name))))?,
                v: read_embeddings(mdir.join(tensor_file(&format!("v.{}", e.name))))?,
                name: e.name,
                steps: e.steps,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let state = LcmState {
        step: info.step,
        params,
        best,
        best_val: info.best_val,
        best_step: info.best_step,
        moments,
        history,
    };
    if info.train.schedule != tm.schedule {
        return Err(Error::Format {
            path: dir.join(STATE_FILE),
            msg: "training schedule differs from the checkpoint schedule".into(),
        });
    }
    Ok((tm.model, info.train, state))
}
