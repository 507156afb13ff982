//! Morphable-model conditioned multi-view generation and animatable Gaussian
//! splat head avatars.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`morphable_model`]: linear blendshape head model, UV remeshing, synthetic models
//! - [`conditioning`]: cameras, z-buffered rasterizer, pose/expression/view maps, cropping
//! - [`scheduler`]: noise schedules, DDIM, guidance and the stochastic I/O sampler
//! - [`view_sampler`]: generation-time cameras and the expression database
//! - [`avatar`]: triangle-bound Gaussian splats, renderer with analytic gradients, fitting
//! - [`pipeline`]: file formats and the generate → fit → render flow

pub mod avatar;
pub mod conditioning;
pub mod image;
pub mod math;
pub mod morphable_model;
pub mod pipeline;
pub mod scheduler;
pub mod view_sampler;

pub use image::Image;
pub use morphable_model::{ExpressionParams, IdentityParams, Mesh, MorphableModel, UvMesh};
pub use avatar::model::Avatar;
pub use avatar::{AvatarError, RenderSettings, SplatSet};
pub use conditioning::{Camera, ConditioningSet};
pub use pipeline::{AvatarFile, PipelineError, RunConfig, TensorBlob};
pub use scheduler::{NoiseSchedule, SamplerConfig};
