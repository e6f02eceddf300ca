//! Dataset handling, tokenization, configuration, the three-stage training
//! schedule, checkpointing and the synthetic corpus generator.

pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod prepare;
pub mod schedule;
pub mod synth;
pub mod vocab;

pub use checkpoint::{
    load_checkpoint, load_mel, load_params_into, save_checkpoint, save_mel, CheckpointConfig,
    LoadedCheckpoint,
};
pub use config::{RunConfig, StageConfig};
pub use manifest::{DatasetManifest, ManifestEntry};
pub use prepare::{prepare, PrepareOptions, Prepared};
pub use schedule::{
    warmup_lr, DatasetRole, EpochLog, GuideOptions, LoadedClip, LoadedDataset, LrPolicy,
    RunReport, Stage, StepTrace, TrainOptions, TrainSchedule, TrainSession,
};
pub use vocab::{
    tokenize, Vocabulary, EOS_ID, EOS_TOKEN, PAD_ID, PAD_TOKEN, SOS_ID, SOS_TOKEN, UNK_ID,
    UNK_TOKEN,
};
