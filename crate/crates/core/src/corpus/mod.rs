//! Synthetic paired data, dataset splitting and on-disk formats.

mod dataset;
pub mod format;
mod world;

pub use dataset::{
    largest_remainder_sizes, read_dataset_dir, split, write_dataset_dir, CurriculumStage, Dataset,
    DatasetManifest, LrOverrides, PairedSample, StoredDataset, BANK, FRAMES, IDS, MANIFEST, TARGETS,
};
pub(crate) use dataset::{read_json, write_json};
pub use format::{read_embeddings, write_embeddings, write_tensor};
pub use world::{gen_synthetic_pairs, random_bank, SyntheticWorld, WorldConfig};
