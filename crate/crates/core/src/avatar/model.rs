//! A fitted avatar: morphable model, identity, UV remesh, splats and field.

use std::sync::Arc;

use super::field::{apply_deformation, deformation_inputs, DeformationField, DeformationInputs, MlpField};
use super::render::{render_detailed, RenderSettings};
use super::splats::SplatSet;
use super::AvatarError;
use crate::conditioning::Camera;
use crate::image::Image;
use crate::math::Vec3;
use crate::morphable_model::{remesh_to_uv, ExpressionParams, IdentityParams, Mesh, MorphableModel, UvMesh};

/// Immutable once built; rendering takes `&self` and is safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Avatar {
    pub model: Arc<MorphableModel>,
    pub beta: IdentityParams,
    pub uv: UvMesh,
    pub splats: SplatSet,
    pub field: MlpField,
    pub settings: RenderSettings,
}

/// The deformed binding mesh for one expression plus what produced it.
#[derive(Debug, Clone)]
pub struct PosedMesh {
    /// UV-grid vertices before corrective deformation.
    pub base: Vec<Vec3>,
    pub inputs: DeformationInputs,
    pub deformation: Vec<Vec3>,
    pub mesh: Mesh,
}

impl Avatar {
    pub fn new(
        model: Arc<MorphableModel>,
        beta: IdentityParams,
        uv_resolution: usize,
        splats: SplatSet,
        field: MlpField,
        settings: RenderSettings,
    ) -> Result<Self, AvatarError> {
        let neutral = model.evaluate_mesh(&beta, &ExpressionParams::zeros(model.k_expr))?;
        let uv = remesh_to_uv(&model, uv_resolution)?.evaluate(&neutral);
        splats.validate(uv.triangles.len())?;
        field.validate()?;
        Ok(Self { model, beta, uv, splats, field, settings })
    }

    /// True where corrective deformation may move a UV vertex.
    pub fn deformable(&self) -> Vec<bool> {
        self.uv.refs.iter().zip(&self.uv.static_mask).map(|(r, s)| r.is_some() && !s).collect()
    }

    pub fn neutral_mesh(&self) -> Mesh {
        self.uv.as_mesh()
    }

    pub fn base_vertices(&self, phi: &ExpressionParams) -> Result<Vec<Vec3>, AvatarError> {
        let src = self.model.evaluate_mesh(&self.beta, phi)?;
        Ok(self.uv.interpolate(&src.vertices))
    }

    pub fn posed(&self, phi: &ExpressionParams) -> Result<PosedMesh, AvatarError> {
        let base = self.base_vertices(phi)?;
        let inputs = deformation_inputs(&self.model, &self.uv, phi)?;
        let deformation = self.field.forward(&inputs);
        let vertices = apply_deformation(&base, &deformation, &self.deformable())?;
        Ok(PosedMesh { base, inputs, deformation, mesh: Mesh::new(vertices, self.uv.triangles.clone()) })
    }

    /// Renders at the camera's own resolution.
    pub fn render(&self, phi: &ExpressionParams, camera: &Camera) -> Result<Image, AvatarError> {
        let posed = self.posed(phi)?;
        Ok(render_detailed(&self.splats, &posed.mesh, camera, &self.settings)?.image)
    }
}
