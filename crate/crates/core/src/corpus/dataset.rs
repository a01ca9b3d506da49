use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{read_embeddings, read_u64s, write_embeddings, write_u64s};
use super::WorldConfig;
use crate::error::{ensure, Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// One video (as per-frame features) paired with its caption embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    /// T×D
    pub frames: Matrix,
    /// d
    pub target: Vec<f64>,
    pub caption_id: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frame_dim: usize,
    pub concept_dim: usize,
    pub frames_per_sample: usize,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Targets stacked as an n×d matrix.
    pub fn targets(&self) -> Matrix {
        let mut m = Matrix::zeros(self.len(), self.concept_dim);
        for (i, s) in self.samples.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&s.target);
        }
        m
    }

    pub fn caption_ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.caption_id).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.empty_like()
        }
    }

    fn empty_like(&self) -> Dataset {
        Dataset {
            frame_dim: self.frame_dim,
            concept_dim: self.concept_dim,
            frames_per_sample: self.frames_per_sample,
            samples: Vec::new(),
        }
    }
}

/// Sizes `floor(f_i·n)` plus one extra unit for the largest remainders
/// (earlier fraction wins ties) until the sizes sum to `n`.
pub fn largest_remainder_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n.saturating_sub(sizes.iter().sum());
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Shuffles with `seed` and cuts into train/val/test.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    ensure(!dataset.is_empty(), || "cannot split an empty dataset".into())?;
    let f = [fractions.0, fractions.1, fractions.2];
    ensure(f.iter().all(|&x| x > 0.0), || format!("split fractions must be positive: {f:?}"))?;
    ensure((f.iter().sum::<f64>() - 1.0).abs() <= 1e-9, || {
        format!("split fractions must sum to 1: {f:?}")
    })?;
    let sizes = largest_remainder_sizes(dataset.len(), &f);
    let perm = SeededRng::new(seed).permutation(dataset.len());
    let (a, rest) = perm.split_at(sizes[0]);
    let (b, c) = rest.split_at(sizes[1]);
    Ok((dataset.subset(a), dataset.subset(b), dataset.subset(c)))
}

pub const MANIFEST: &str = "manifest.json";
pub const FRAMES: &str = "frames.bin";
pub const TARGETS: &str = "targets.bin";
pub const IDS: &str = "ids.bin";
pub const BANK: &str = "bank.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub frame_dim: usize,
    pub concept_dim: usize,
    pub frames_per_sample: usize,
    pub count: usize,
    /// Seed of the sample stream (the world has its own seed in `world`).
    pub seed: u64,
    pub world: WorldConfig,
}

/// A dataset directory: samples, the caption bank they were drawn from, and the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredDataset {
    pub manifest: DatasetManifest,
    pub dataset: Dataset,
    pub bank: Matrix,
}

pub fn write_dataset_dir(dir: &Path, manifest: &DatasetManifest, dataset: &Dataset, bank: &Matrix) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Matrix::zeros(0, dataset.frame_dim);
    for s in &dataset.samples {
        for r in s.frames.iter_rows() {
            frames.push_row(r)?;
        }
    }
    write_embeddings(dir.join(FRAMES), &frames)?;
    write_embeddings(dir.join(TARGETS), &dataset.targets())?;
    write_u64s(&dir.join(IDS), &dataset.caption_ids())?;
    write_embeddings(dir.join(BANK), bank)?;
    write_json(&dir.join(MANIFEST), manifest)
}

pub fn read_dataset_dir(dir: &Path) -> Result<StoredDataset> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST))?;
    let frames = read_embeddings(dir.join(FRAMES))?;
    let targets = read_embeddings(dir.join(TARGETS))?;
    let ids = read_u64s(&dir.join(IDS))?;
    let bank = read_embeddings(dir.join(BANK))?;
    let t = manifest.frames_per_sample;
    let bad = |msg: String| Error::Format {
        path: dir.to_path_buf(),
        msg,
    };
    if frames.rows() != manifest.count * t || frames.cols() != manifest.frame_dim {
        return Err(bad(format!(
            "frames are {:?}, manifest says {} samples of {t}x{}",
            frames.shape(),
            manifest.count,
            manifest.frame_dim
        )));
    }
    if targets.rows() != manifest.count || targets.cols() != manifest.concept_dim || ids.len() != manifest.count {
        return Err(bad("targets/ids disagree with the manifest".into()));
    }
    let samples = (0..manifest.count)
        .map(|i| PairedSample {
            frames: frames.select_rows(&(i * t..(i + 1) * t).collect::<Vec<_>>()),
            target: targets.row(i).to_vec(),
            caption_id: ids[i],
        })
        .collect();
    let dataset = Dataset {
        frame_dim: manifest.frame_dim,
        concept_dim: manifest.concept_dim,
        frames_per_sample: t,
        samples,
    };
    Ok(StoredDataset { manifest, dataset, bank })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Learning-rate settings a curriculum stage may override.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LrOverrides {
    pub lr_projector: Option<f64>,
    pub lr_encoder_adapter: Option<f64>,
    pub warmup_steps: Option<usize>,
}

/// One stage of the coarse-to-fine curriculum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CurriculumStage {
    pub name: String,
    pub dataset_path: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub lr_overrides: Option<LrOverrides>,
}

impl CurriculumStage {
    pub fn validate(&self) -> Result<()> {
        ensure(self.epochs >= 1, || format!("stage {}: epochs must be >= 1", self.name))?;
        ensure(self.batch_size >= 1, || {
            format!("stage {}: batch_size must be >= 1", self.name)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let stage: CurriculumStage = read_json(path)?;
        stage.validate()?;
        Ok(stage)
    }
}
