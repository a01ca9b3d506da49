//! Two-tower latent diffusion over concept-embedding sequences: a causal
//! contextualizer encodes the prefix, a denoiser reconstructs the next
//! embedding from its noised version.

mod loss;
mod model;
mod sample;
mod schedule;
mod sequence;
mod train;

pub use loss::{diffusion_loss, reconstruction_loss, LossStats};
pub use model::{
    contextualize, denoise, init_two_tower, lambda_embedding, ContextLayer, TwoTowerConfig, TwoTowerParams,
};
pub use sample::{guided_denoise, sample_next, sampling_timesteps, SamplerConfig};
pub use schedule::{build_schedule, forward_diffuse, DiffusionState, NoiseSchedule, ScheduleConfig};
pub use sequence::{
    items_from_sequences, read_sequence_dir, write_sequence_dir, DiffusionItem, EmbeddingSequence, Modality,
    RuleConfig, RuleWorld, SequenceCorpus, SequenceManifest,
};
pub use train::{
    lcm_lr, train_lcm, LcmHistory, LcmOutcome, LcmState, LcmStepRecord, LcmTrainConfig, LcmTrainer, LcmValRecord,
};
