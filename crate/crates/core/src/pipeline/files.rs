//! Model and avatar files on top of the blob container.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::blob::TensorBlob;
use super::container::Container;
use super::{FormatError, PipelineError};
use crate::avatar::field::MlpField;
use crate::avatar::model::Avatar;
use crate::avatar::render::RenderSettings;
use crate::avatar::sh::num_coeffs;
use crate::avatar::splats::SplatSet;
use crate::math::Vec3;
use crate::morphable_model::{IdentityParams, MorphableModel, PoseNormalization, SynthParams};
use crate::view_sampler::{ExpressionDatabase, OrbitRig, DEFAULT_PSI_MAX, DEFAULT_THETA_MAX};

pub const MODEL_KIND: &str = "morphable-model";
pub const AVATAR_KIND: &str = "avatar";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    k_id: usize,
    k_expr: usize,
    pose_normalization: PoseNormalization,
    /// Set when the model was generated procedurally.
    synth: Option<SynthParams>,
}

fn push_model(c: &mut Container, prefix: &str, model: &MorphableModel) -> Result<(), FormatError> {
    let nv = model.num_vertices();
    c.push(format!("{prefix}template"), TensorBlob::f64(&[nv, 3], model.template.iter().flat_map(|v| [v.x, v.y, v.z]).collect())?)?;
    c.push(format!("{prefix}triangles"), TensorBlob::u32(&[model.triangles.len(), 3], model.triangles.as_flattened().to_vec())?)?;
    c.push(format!("{prefix}identity_basis"), TensorBlob::f64(&[nv, 3, model.k_id], model.identity_basis.clone())?)?;
    c.push(format!("{prefix}expression_basis"), TensorBlob::f64(&[nv, 3, model.k_expr], model.expression_basis.clone())?)?;
    if let Some(uv) = &model.uv_coords {
        c.push(format!("{prefix}uv_coords"), TensorBlob::f64(&[nv, 2], uv.as_flattened().to_vec())?)?;
    }
    c.push(format!("{prefix}static_mask"), TensorBlob::u8(&[nv], model.static_mask.iter().map(|&b| b as u8).collect())?)?;
    Ok(())
}

fn read_model(c: &Container, prefix: &str, meta: &ModelMeta) -> Result<MorphableModel, PipelineError> {
    let get = |name: &str| c.get(&format!("{prefix}{name}"));
    let template = get("template")?;
    let nv = template.dims()[0] as usize;
    template.expect_dims("template", &[None, Some(3)])?;
    let template: Vec<Vec3> = template.as_f64("template")?.chunks_exact(3).map(|p| Vec3::new(p[0], p[1], p[2])).collect();
    let tris = get("triangles")?;
    tris.expect_dims("triangles", &[None, Some(3)])?;
    let triangles: Vec<[u32; 3]> = tris.as_u32("triangles")?.chunks_exact(3).map(|t| [t[0], t[1], t[2]]).collect();
    let id = get("identity_basis")?;
    id.expect_dims("identity_basis", &[Some(nv), Some(3), Some(meta.k_id)])?;
    let ex = get("expression_basis")?;
    ex.expect_dims("expression_basis", &[Some(nv), Some(3), Some(meta.k_expr)])?;
    let uv = if c.contains(&format!("{prefix}uv_coords")) {
        let b = get("uv_coords")?;
        b.expect_dims("uv_coords", &[Some(nv), Some(2)])?;
        Some(b.as_f64("uv_coords")?.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
    } else {
        None
    };
    let mask = get("static_mask")?;
    mask.expect_dims("static_mask", &[Some(nv)])?;
    let mut model = MorphableModel::new(
        template,
        triangles,
        id.as_f64("identity_basis")?.to_vec(),
        meta.k_id,
        ex.as_f64("expression_basis")?.to_vec(),
        meta.k_expr,
        uv,
        mask.as_u8("static_mask")?.iter().map(|&b| b != 0).collect(),
    )?;
    model.pose_normalization = meta.pose_normalization;
    Ok(model)
}

fn model_meta(model: &MorphableModel, synth: Option<SynthParams>) -> ModelMeta {
    ModelMeta { k_id: model.k_id, k_expr: model.k_expr, pose_normalization: model.pose_normalization, synth }
}

pub fn model_to_container(model: &MorphableModel, synth: Option<SynthParams>) -> Result<Container, FormatError> {
    let mut c = Container::new(MODEL_KIND, &model_meta(model, synth))?;
    push_model(&mut c, "", model)?;
    Ok(c)
}

pub fn model_from_container(c: &Container) -> Result<MorphableModel, PipelineError> {
    c.expect_kind(MODEL_KIND)?;
    read_model(c, "", &c.meta()?)
}

pub fn write_model(path: &Path, model: &MorphableModel, synth: Option<SynthParams>) -> Result<(), PipelineError> {
    model_to_container(model, synth)?.write_file(path).map_err(|e| PipelineError::at(path, e))
}

pub fn read_model_file(path: &Path) -> Result<MorphableModel, PipelineError> {
    model_from_container(&Container::read_file(path).map_err(|e| PipelineError::at(path, e))?)
}

/// The view region an avatar was generated for; the render service clamps to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewLimits {
    pub psi_max: f64,
    pub theta_max: f64,
    pub rig: OrbitRig,
}

impl ViewLimits {
    pub fn new(psi_max: f64, theta_max: f64, rig: OrbitRig) -> Self {
        Self { psi_max, theta_max, rig }
    }
}

impl Default for ViewLimits {
    fn default() -> Self {
        Self { psi_max: DEFAULT_PSI_MAX, theta_max: DEFAULT_THETA_MAX, rig: OrbitRig::head(crate::conditioning::DEFAULT_LATENT_RESOLUTION) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AvatarMeta {
    model: ModelMeta,
    beta: Vec<f64>,
    uv_resolution: usize,
    sh_degree: usize,
    splats: usize,
    field_hidden: usize,
    settings: RenderSettings,
    view: ViewLimits,
    expressions: Option<ExpressionDatabase>,
}

/// A fitted avatar with what the render service needs to expose it.
#[derive(Debug, Clone, PartialEq)]
pub struct AvatarFile {
    pub avatar: Avatar,
    pub view: ViewLimits,
    pub expressions: Option<ExpressionDatabase>,
}

impl AvatarFile {
    pub fn to_container(&self) -> Result<Container, FormatError> {
        let a = &self.avatar;
        let s = &a.splats;
        let n = s.len();
        let meta = AvatarMeta {
            model: model_meta(&a.model, None),
            beta: a.beta.0.clone(),
            uv_resolution: a.uv.resolution,
            sh_degree: s.sh_degree,
            splats: n,
            field_hidden: a.field.hidden,
            settings: a.settings,
            view: self.view.clone(),
            expressions: self.expressions.clone(),
        };
        let mut c = Container::new(AVATAR_KIND, &meta)?;
        push_model(&mut c, "model.", &a.model)?;
        c.push("splats.position", TensorBlob::f64(&[n, 3], s.position.as_flattened().to_vec())?)?;
        c.push("splats.log_scale", TensorBlob::f64(&[n, 3], s.log_scale.as_flattened().to_vec())?)?;
        c.push("splats.rotation", TensorBlob::f64(&[n, 4], s.rotation.as_flattened().to_vec())?)?;
        c.push("splats.sh", TensorBlob::f64(&[n, s.coeffs(), 3], s.sh.clone())?)?;
        c.push("splats.opacity", TensorBlob::f64(&[n], s.opacity.clone())?)?;
        c.push("splats.parent", TensorBlob::u32(&[n], s.parent.clone())?)?;
        c.push("field.params", TensorBlob::f64(&[a.field.params.len()], a.field.params.clone())?)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self, PipelineError> {
        c.expect_kind(AVATAR_KIND)?;
        let meta: AvatarMeta = c.meta()?;
        let model = Arc::new(read_model(c, "model.", &meta.model)?);
        let n = meta.splats;
        let nc = num_coeffs(meta.sh_degree);
        let f64s = |name: &str, dims: &[Option<usize>]| -> Result<Vec<f64>, FormatError> {
            let b = c.get(name)?;
            b.expect_dims(name, dims)?;
            Ok(b.as_f64(name)?.to_vec())
        };
        let rows3 = |v: Vec<f64>| v.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect::<Vec<_>>();
        let parent = c.get("splats.parent")?;
        parent.expect_dims("splats.parent", &[Some(n)])?;
        let splats = SplatSet {
            sh_degree: meta.sh_degree,
            position: rows3(f64s("splats.position", &[Some(n), Some(3)])?),
            log_scale: rows3(f64s("splats.log_scale", &[Some(n), Some(3)])?),
            rotation: f64s("splats.rotation", &[Some(n), Some(4)])?.chunks_exact(4).map(|q| [q[0], q[1], q[2], q[3]]).collect(),
            sh: f64s("splats.sh", &[Some(n), Some(nc), Some(3)])?,
            opacity: f64s("splats.opacity", &[Some(n)])?,
            parent: parent.as_u32("splats.parent")?.to_vec(),
        };
        let field = MlpField { hidden: meta.field_hidden, params: f64s("field.params", &[None])? };
        let avatar = Avatar::new(model, IdentityParams(meta.beta), meta.uv_resolution, splats, field, meta.settings)?;
        Ok(Self { avatar, view: meta.view, expressions: meta.expressions })
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        self.to_container()?.write_file(path).map_err(|e| PipelineError::at(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        Self::from_container(&Container::read_file(path).map_err(|e| PipelineError::at(path, e))?)
    }
}
