//! Toy text-conditioned diffusion engine: variance-preserving schedules, an
//! x-prediction denoiser, the identity + prior-preservation objective,
//! fine-tuning, sampling, and the backend contract shared with full-scale
//! generators.

pub mod backend;
pub mod base;
pub mod denoiser;
pub mod loss;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use backend::{BackendHandle, BackendTuneConfig, GenerationBackend, ToyBackend};
pub use base::{train_base_model, BaseModelConfig};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use loss::{
    add_noise, prior_preservation_loss, prior_preservation_loss_and_grad, LossBreakdown,
    LossConfig, LossItem,
};
pub use sampler::{sample, sampling_timesteps};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleKind};
pub use train::{fine_tune, FineTuneConfig, FineTuneOutcome, DEFAULT_FINE_TUNE_STEPS, FULL_SCALE_LEARNING_RATE};
