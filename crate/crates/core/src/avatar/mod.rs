//! Gaussian splats bound to the triangles of a UV-remeshed morphable model,
//! with a corrective deformation field, a differentiable renderer and fitting.

pub mod adam;
pub mod field;
pub mod fit;
pub mod frame;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod render;
pub mod sh;
pub mod splats;

pub use frame::{triangle_frame, TriangleFrame};
pub use render::{render_backward, render_detailed, render_splats, RenderOutput, RenderSettings, SplatGrads};
pub use gradcheck::{gradient_check, GradientCheckReport, GradientScene, ParamSubset};
pub use model::{Avatar, PosedMesh};
pub use splats::{init_splats, init_splats_with, splat_world_state, InitOptions, SplatSet, WorldGaussian};

#[derive(Debug, thiserror::Error)]
pub enum AvatarError {
    #[error("triangle {0} is degenerate")]
    DegenerateTriangle(usize),
    #[error("parent triangle {parent} out of range ({triangles} triangles)")]
    InvalidParent { parent: usize, triangles: usize },
    #[error("non-finite splat parameters")]
    NonFinite,
    #[error("shape mismatch: {what} expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("loss diverged at iteration {iteration}: {state}")]
    Diverged { iteration: usize, state: String },
    #[error(transparent)]
    Model(#[from] crate::morphable_model::ModelError),
}
