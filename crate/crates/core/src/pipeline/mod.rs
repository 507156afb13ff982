//! File formats and the generate → fit → render flow behind the command line
//! and the render service.
//!
//! Formats: run configs are TOML, manifests and metadata JSON, tensors MAVT
//! blobs, model and avatar files named-blob containers, images PNG.

pub mod blob;
pub mod config;
pub mod container;
pub mod files;
pub mod generate;
pub mod render;
pub mod train;

use std::path::{Path, PathBuf};

pub use blob::{BlobData, DType, TensorBlob};
pub use config::{GenerateConfig, ModelSpec, ReferenceView, RunConfig};
pub use container::Container;
pub use files::{read_model_file, write_model, AvatarFile, ViewLimits};
pub use generate::{cmd_generate, cmd_synth_model, generate, GenerateOutput, Manifest, ManifestImage, Provenance};
pub use render::{cmd_render, render_frame, view_camera, RenderRequest, RenderResponse, ServiceMeta};
pub use train::{cmd_fit, fit_log_csv, FitOutput};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: not a {expected} file")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("rank must be in 1..=255, got {0}")]
    BadRank(usize),
    #[error("dims describe {expected} elements but {got} were given")]
    ElementCount { expected: usize, got: usize },
    #[error("truncated: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("{0} trailing bytes after the payload")]
    TrailingBytes(usize),
    #[error("size overflows the address space")]
    Overflow,
    #[error("missing blob {0:?}")]
    MissingBlob(String),
    #[error("{0}")]
    Invalid(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{what}: expected {expected} values, got {got}")]
    ParameterLength { what: &'static str, expected: usize, got: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Model(#[from] crate::morphable_model::ModelError),
    #[error(transparent)]
    Conditioning(#[from] crate::conditioning::ConditioningError),
    #[error(transparent)]
    Scheduler(#[from] crate::scheduler::SchedulerError),
    #[error(transparent)]
    ViewSampler(#[from] crate::view_sampler::ViewSamplerError),
    #[error(transparent)]
    Avatar(#[from] crate::avatar::AvatarError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    pub fn at(path: &Path, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        PipelineError::File { path: path.to_path_buf(), source: source.into() }
    }

    /// True for errors caused by the caller's input rather than by the files or
    /// the machine.
    pub fn is_invalid_input(&self) -> bool {
        matches!(self, PipelineError::ParameterLength { .. } | PipelineError::Invalid(_) | PipelineError::Config(_))
    }
}

/// Checks a parameter vector's length and finiteness.
pub fn check_params(what: &'static str, values: &[f64], expected: usize) -> Result<(), PipelineError> {
    if values.len() != expected {
        return Err(PipelineError::ParameterLength { what, expected, got: values.len() });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(PipelineError::Invalid(format!("{what}[{i}] is not finite")));
    }
    Ok(())
}

pub(crate) fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| PipelineError::at(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::at(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::at(path, e))
}

pub(crate) fn write_png(path: &Path, img: &crate::image::Image) -> Result<(), PipelineError> {
    std::fs::write(path, img.to_png_bytes()?).map_err(|e| PipelineError::at(path, e))
}

pub(crate) fn read_png(path: &Path) -> Result<crate::image::Image, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::at(path, e))?;
    crate::image::Image::read_png(&bytes).map_err(|e| PipelineError::at(path, e))
}
