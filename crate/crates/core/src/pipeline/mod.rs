//! Experiment configuration, checkpoints and stage orchestration.

mod checkpoint;
mod config;
mod lock;
mod run;
mod samples;

pub use checkpoint::{
    arrays_from_params, checkpoint_from_state, params_from_arrays, sha256_hex, Checkpoint,
    DecoderCheckpoint, ModelKind, NamedArray, Provenance, FORMAT_VERSION,
};
pub use config::{DataSection, EncoderSection, ExperimentConfig, NetworkSection, SamplerSection};
pub use lock::{DirLock, LOCK_FILE};
pub use run::{
    checkpoint_file, Evaluation, Experiment, FileObserver, NfeMetrics, PipelineSummary,
    StageRecord, DECODER_FILE, EVALUATION_FILE, METRICS_FILE,
};
pub use samples::{
    decode_latents, draw_classes, read_samples_csv, sample_map, sample_teacher, write_samples_csv,
};
