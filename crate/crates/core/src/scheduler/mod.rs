//! Noise schedules, DDIM stepping, classifier-free guidance and the stochastic
//! I/O sampler that lets many generated views share one diffusion process.

pub mod ddim;
pub mod denoisers;
pub mod sampler;
pub mod schedule;

pub use ddim::{cfg_combine, ddim_step, ddim_step_levels, ddim_update};
pub use denoisers::{AnalyticGaussianDenoiser, OracleMeshDenoiser};
pub use sampler::{
    apply_timestep, initial_noise, plan_timestep, sample_stochastic_io, sampling_timesteps, Conditioning, DenoiseRequest, Denoiser,
    SamplerConfig, SamplerOutput, SamplerTrace, StepContext, TraceBatch, TraceStep, ZERO_SNR_FLOOR,
};
pub use schedule::{default_schedule, make_base_schedule, rescale_zero_terminal_snr, shift_snr, NoiseSchedule, DEFAULT_TRAIN_STEPS};

#[derive(Debug, thiserror::Error)]
pub enum SchedulerError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("schedule is flat; cannot rescale to zero terminal SNR")]
    FlatSchedule,
    #[error("DDIM step from a level with zero signal (ᾱ_t = 0)")]
    ZeroSourceAlpha,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("sampler configuration: {0}")]
    Config(String),
    #[error("denoiser: {0}")]
    Denoiser(String),
}
