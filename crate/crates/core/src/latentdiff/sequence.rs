use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_embeddings, read_json, write_json, write_tensor};
use crate::error::{ensure, Error, Result};
use crate::numerics::{Matrix, SeededRng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Text,
    Vision,
}

impl Modality {
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Vision => 1,
        }
    }
}

/// Ordered concept embeddings (one per row) with a modality tag per position.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub embeddings: Matrix,
    pub modalities: Vec<Modality>,
}

impl EmbeddingSequence {
    pub fn new(embeddings: Matrix) -> Self {
        let modalities = vec![Modality::Text; embeddings.rows()];
        Self { embeddings, modalities }
    }

    pub fn with_modalities(embeddings: Matrix, modalities: Vec<Modality>) -> Result<Self> {
        ensure(modalities.len() == embeddings.rows(), || {
            format!("{} modality tags for {} embeddings", modalities.len(), embeddings.rows())
        })?;
        Ok(Self { embeddings, modalities })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// The first `n` positions.
    pub fn prefix(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n).collect();
        Self {
            embeddings: self.embeddings.select_rows(&idx),
            modalities: self.modalities[..n].to_vec(),
        }
    }
}

/// A training pair: everything before the target, and the target itself.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionItem {
    pub prefix: EmbeddingSequence,
    pub target: Vec<f64>,
}

/// Every `(prefix, next)` pair whose prefix has at least `min_context` positions.
pub fn items_from_sequences(seqs: &[EmbeddingSequence], min_context: usize) -> Vec<DiffusionItem> {
    let min_context = min_context.max(1);
    let mut out = Vec::new();
    for s in seqs {
        for n in min_context..s.len() {
            out.push(DiffusionItem {
                prefix: s.prefix(n),
                target: s.embeddings.row(n).to_vec(),
            });
        }
    }
    out
}

pub const SEQ_MANIFEST: &str = "manifest.json";
pub const SEQ_EMBEDDINGS: &str = "embeddings.bin";
pub const SEQ_BANK: &str = "bank.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub dim: usize,
    pub lengths: Vec<usize>,
    pub modalities: Vec<Vec<Modality>>,
    /// Bank index of every position, when the corpus was drawn from a bank.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank_ids: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<RuleConfig>,
}

/// Sequences stored on disk with their optional source bank.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceCorpus {
    pub sequences: Vec<EmbeddingSequence>,
    pub bank: Option<Matrix>,
    pub bank_ids: Option<Vec<Vec<usize>>>,
    pub rule: Option<RuleConfig>,
}

pub fn write_sequence_dir(dir: &Path, corpus: &SequenceCorpus) -> Result<()> {
    ensure(!corpus.sequences.is_empty(), || "no sequences to write".into())?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dim = corpus.sequences[0].dim();
    let mut all = Matrix::zeros(0, dim);
    for s in &corpus.sequences {
        ensure(s.dim() == dim, || "sequences disagree on dimension".into())?;
        for r in s.embeddings.iter_rows() {
            all.push_row(r)?;
        }
    }
    write_tensor(dir.join(SEQ_EMBEDDINGS), &all)?;
    if let Some(bank) = &corpus.bank {
        write_tensor(dir.join(SEQ_BANK), bank)?;
    }
    let manifest = SequenceManifest {
        dim,
        lengths: corpus.sequences.iter().map(|s| s.len()).collect(),
        modalities: corpus.sequences.iter().map(|s| s.modalities.clone()).collect(),
        bank_ids: corpus.bank_ids.clone(),
        rule: corpus.rule.clone(),
    };
    write_json(&dir.join(SEQ_MANIFEST), &manifest)
}

pub fn read_sequence_dir(dir: &Path) -> Result<SequenceCorpus> {
    let manifest: SequenceManifest = read_json(&dir.join(SEQ_MANIFEST))?;
    let all = read_embeddings(dir.join(SEQ_EMBEDDINGS))?;
    let total: usize = manifest.lengths.iter().sum();
    if all.rows() != total || all.cols() != manifest.dim || manifest.modalities.len() != manifest.lengths.len() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            msg: format!(
                "embeddings are {:?}, manifest says {} rows of width {}",
                all.shape(),
                total,
                manifest.dim
            ),
        });
    }
    let mut sequences = Vec::with_capacity(manifest.lengths.len());
    let mut start = 0;
    for (len, mods) in manifest.lengths.iter().zip(manifest.modalities) {
        let idx: Vec<usize> = (start..start + len).collect();
        sequences.push(EmbeddingSequence::with_modalities(all.select_rows(&idx), mods)?);
        start += len;
    }
    let bank_path = dir.join(SEQ_BANK);
    let bank = if bank_path.exists() {
        Some(read_embeddings(bank_path)?)
    } else {
        None
    };
    Ok(SequenceCorpus {
        sequences,
        bank,
        bank_ids: manifest.bank_ids,
        rule: manifest.rule,
    })
}

/// Sequences over a caption bank whose last element is a fixed permutation of the one before it.
///
/// `[u_1, …, u_k, x, π(x)]` with the `u_i` and `x` drawn uniformly from the bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    pub seed: u64,
    pub bank_size: usize,
    pub dim: usize,
    /// Random positions before the rule's input.
    pub distractors: usize,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            bank_size: 64,
            dim: 32,
            distractors: 2,
        }
    }
}

/// A bank of unit-norm rows and the permutation `π` defining the rule.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleWorld {
    pub config: RuleConfig,
    pub bank: Matrix,
    pub successor: Vec<usize>,
}

impl RuleWorld {
    pub fn new(config: RuleConfig) -> Result<Self> {
        ensure(config.bank_size >= 2 && config.dim >= 1, || {
            "rule world needs a bank of at least 2 entries and dim >= 1".into()
        })?;
        let mut rng = SeededRng::derive(config.seed, 0);
        let mut bank = Matrix::zeros(config.bank_size, config.dim);
        for i in 0..config.bank_size {
            let v = rng.gaussian_vec(config.dim);
            let n = crate::numerics::norm(&v).max(f64::MIN_POSITIVE);
            for (dst, x) in bank.row_mut(i).iter_mut().zip(&v) {
                *dst = x / n;
            }
        }
        let successor = rng.permutation(config.bank_size);
        Ok(Self {
            config,
            bank,
            successor,
        })
    }

    /// Bank ids of one sequence; the last id is `π` of the one before it.
    pub fn draw_ids(&self, rng: &mut SeededRng) -> Vec<usize> {
        let n = self.config.bank_size;
        let mut ids: Vec<usize> = (0..=self.config.distractors).map(|_| rng.below(n)).collect();
        ids.push(self.successor[*ids.last().unwrap()]);
        ids
    }

    pub fn sequence(&self, ids: &[usize]) -> EmbeddingSequence {
        EmbeddingSequence::new(self.bank.select_rows(ids))
    }

    pub fn generate(&self, count: usize, rng: &mut SeededRng) -> SequenceCorpus {
        let ids: Vec<Vec<usize>> = (0..count).map(|_| self.draw_ids(rng)).collect();
        SequenceCorpus {
            sequences: ids.iter().map(|i| self.sequence(i)).collect(),
            bank: Some(self.bank.clone()),
            bank_ids: Some(ids),
            rule: Some(self.config.clone()),
        }
    }
}
