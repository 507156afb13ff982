//! Single-frame rendering of a fitted avatar, shared by `render` and the service.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::files::{AvatarFile, ViewLimits};
use super::{check_params, write_png, PipelineError};
use crate::conditioning::Camera;
use crate::image::Image;
use crate::morphable_model::ExpressionParams;
use crate::view_sampler::clamp_to_ellipse;

/// Largest width or height the renderer accepts.
pub const MAX_RENDER_SIZE: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceMeta {
    #[serde(rename = "K_expr")]
    pub k_expr: usize,
    pub psi_max: f64,
    pub theta_max: f64,
    pub resolution: usize,
}

impl ServiceMeta {
    pub fn of(file: &AvatarFile) -> Self {
        Self { k_expr: file.avatar.model.k_expr, psi_max: file.view.psi_max, theta_max: file.view.theta_max, resolution: file.view.rig.size }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    pub phi: Vec<f64>,
    #[serde(default)]
    pub azimuth: f64,
    #[serde(default)]
    pub elevation: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResponse {
    pub image: Image,
    /// Angles actually rendered.
    pub azimuth: f64,
    pub elevation: f64,
    pub clamped: bool,
}

/// Orbit camera for (azimuth, elevation) degrees at `width × height`. The focal
/// length scales with the height so the head keeps its size on screen.
pub fn view_camera(view: &ViewLimits, azimuth: f64, elevation: f64, width: usize, height: usize) -> Result<Camera, PipelineError> {
    check_size(width, height)?;
    let base = view.rig.camera(azimuth, elevation)?;
    let f = view.rig.focal * height as f64 / view.rig.size as f64;
    Ok(Camera { fx: f, fy: f, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height, ..base })
}

fn check_size(width: usize, height: usize) -> Result<(), PipelineError> {
    if width == 0 || height == 0 || width > MAX_RENDER_SIZE || height > MAX_RENDER_SIZE {
        return Err(PipelineError::Invalid(format!("width and height must be in 1..={MAX_RENDER_SIZE}, got {width}×{height}")));
    }
    Ok(())
}

/// Renders one frame after validating φ against the model.
pub fn render_frame(file: &AvatarFile, phi: &[f64], camera: &Camera) -> Result<Image, PipelineError> {
    check_params("phi", phi, file.avatar.model.k_expr)?;
    check_size(camera.width, camera.height)?;
    camera.validate().map_err(|e| PipelineError::Invalid(e.to_string()))?;
    Ok(file.avatar.render(&ExpressionParams(phi.to_vec()), camera)?)
}

impl RenderRequest {
    /// Validates the request and renders it, clamping the view to the generation
    /// ellipse. Depends only on the request and the avatar.
    pub fn render(&self, file: &AvatarFile) -> Result<RenderResponse, PipelineError> {
        check_params("phi", &self.phi, file.avatar.model.k_expr)?;
        if !(self.azimuth.is_finite() && self.elevation.is_finite()) {
            return Err(PipelineError::Invalid("azimuth and elevation must be finite".into()));
        }
        let (azimuth, elevation, clamped) = clamp_to_ellipse(self.azimuth, self.elevation, file.view.psi_max, file.view.theta_max);
        let camera = view_camera(&file.view, azimuth, elevation, self.width, self.height)?;
        let image = render_frame(file, &self.phi, &camera)?;
        Ok(RenderResponse { image, azimuth, elevation, clamped })
    }
}

/// Renders to a PNG file. Nothing is written when validation fails.
pub fn cmd_render(file: &AvatarFile, phi: &[f64], camera: &Camera, out: &Path) -> Result<Image, PipelineError> {
    let image = render_frame(file, phi, camera)?;
    write_png(out, &image)?;
    Ok(image)
}
