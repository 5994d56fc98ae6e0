//! Training stages: flow-matching pre-training, consistency mid-training and
//! MeanFlow post-training with a lambda-mixed proxy velocity.

mod config;
mod loss;
mod metrics;
mod stage;

pub use config::{DerivativeMode, Stage, TimeSampling, TimeWeight, TrainConfig};
pub use loss::{
    build_w_lambda, cmt_batch, cmt_loss, fd_offsets, fm_loss, mf_loss, mf_loss_reference,
    mf_loss_split, mf_target, mix_velocities, noise_batch, one_point_batch, sample_cmt_pairs,
    sample_fm_batch, sample_mf_batch, transport_derivative_fd, transport_derivative_jvp, CmtBatch,
    FmBatch, LossOutput, MfBatch, MfSettings, ReferenceGradients, TargetTerms, TransportMap,
};
pub use metrics::{MetricsRow, MetricsWriter, METRICS_HEADER};
pub use stage::{train_stage, Model, StageContext, StageObserver, StageReport, TrainState};
