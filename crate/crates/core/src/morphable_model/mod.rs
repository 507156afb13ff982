//! Linear 3D morphable head model.
//!
//! Vertex positions are `template + identity_basis·β + expression_basis·φ`. Bases
//! are stored vertex-major as `N_v × 3 × K` so one vertex coordinate's weights are
//! contiguous.

mod synth;
mod uv;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::math::Vec3;

pub use synth::{synth_model, SynthParams};
pub use uv::{remesh_to_uv, BaryRef, UvMesh, DEFAULT_UV_RESOLUTION};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("parameter shape: expected {expected} {what} coefficients, got {got}")]
    ParameterShape { what: &'static str, expected: usize, got: usize },
    #[error("non-finite {0} parameters")]
    NonFinite(&'static str),
    #[error("model has no UV atlas")]
    MissingUvAtlas,
    #[error("invalid model: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionParams(pub Vec<f64>);

impl IdentityParams {
    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }
}

impl ExpressionParams {
    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }
}

/// Affine map applied to template coordinates before positional encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseNormalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl PoseNormalization {
    /// Maps the template bounding box into `[-π, π]` along its longest axis.
    pub fn fit(points: &[Vec3]) -> Self {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let center = (lo + hi) * 0.5;
        let half = ((hi - lo) * 0.5).max();
        let scale = if half > 0.0 { std::f64::consts::PI / half } else { 1.0 };
        Self { center: [center.x, center.y, center.z], scale }
    }

    pub fn apply(&self, p: &Vec3) -> [f64; 3] {
        [
            (p.x - self.center[0]) * self.scale,
            (p.y - self.center[1]) * self.scale,
            (p.z - self.center[2]) * self.scale,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    pub template: Vec<Vec3>,
    pub triangles: Arc<Vec<[u32; 3]>>,
    pub identity_basis: Vec<f64>,
    pub k_id: usize,
    pub expression_basis: Vec<f64>,
    pub k_expr: usize,
    pub uv_coords: Option<Vec<[f64; 2]>>,
    /// True for vertices excluded from corrective deformation.
    pub static_mask: Vec<bool>,
    pub pose_normalization: PoseNormalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Arc<Vec<[u32; 3]>>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Arc<Vec<[u32; 3]>>) -> Self {
        Self { vertices, triangles }
    }

    pub fn triangle_vertices(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_vertices(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn centroid(&self) -> Vec3 {
        if self.vertices.is_empty() {
            return Vec3::zeros();
        }
        self.vertices.iter().sum::<Vec3>() / self.vertices.len() as f64
    }

    /// Applies `p ↦ R·p + t` to every vertex.
    pub fn transformed(&self, rotation: &crate::math::Mat3, translation: &Vec3) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| rotation * v + translation).collect(),
            triangles: self.triangles.clone(),
        }
    }
}

impl MorphableModel {
    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    /// Builds a model and computes the pose normalization from the template.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        template: Vec<Vec3>,
        triangles: Vec<[u32; 3]>,
        identity_basis: Vec<f64>,
        k_id: usize,
        expression_basis: Vec<f64>,
        k_expr: usize,
        uv_coords: Option<Vec<[f64; 2]>>,
        static_mask: Vec<bool>,
    ) -> Result<Self, ModelError> {
        let pose_normalization = PoseNormalization::fit(&template);
        let model = Self {
            template,
            triangles: Arc::new(triangles),
            identity_basis,
            k_id,
            expression_basis,
            k_expr,
            uv_coords,
            static_mask,
            pose_normalization,
        };
        model.validate_shapes()?;
        Ok(model)
    }

    fn validate_shapes(&self) -> Result<(), ModelError> {
        let nv = self.num_vertices();
        if self.identity_basis.len() != nv * 3 * self.k_id {
            return Err(ModelError::Invalid(format!(
                "identity basis has {} entries, expected {}",
                self.identity_basis.len(),
                nv * 3 * self.k_id
            )));
        }
        if self.expression_basis.len() != nv * 3 * self.k_expr {
            return Err(ModelError::Invalid(format!(
                "expression basis has {} entries, expected {}",
                self.expression_basis.len(),
                nv * 3 * self.k_expr
            )));
        }
        if self.static_mask.len() != nv {
            return Err(ModelError::Invalid("static mask length".into()));
        }
        if let Some(uv) = &self.uv_coords {
            if uv.len() != nv {
                return Err(ModelError::Invalid("uv length".into()));
            }
        }
        for tri in self.triangles.iter() {
            if tri.iter().any(|&i| i as usize >= nv) {
                return Err(ModelError::Invalid(format!("triangle index out of range: {tri:?}")));
            }
        }
        Ok(())
    }

    /// Checks every structural invariant, including a non-overlapping UV layout.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.validate_shapes()?;
        let mesh = self.template_mesh();
        for t in 0..self.triangles.len() {
            if !(mesh.triangle_area(t) > 1e-14) {
                return Err(ModelError::Invalid(format!("degenerate template triangle {t}")));
            }
        }
        if self.template.iter().any(|v| !v.iter().all(|x| x.is_finite()))
            || self.identity_basis.iter().any(|x| !x.is_finite())
            || self.expression_basis.iter().any(|x| !x.is_finite())
        {
            return Err(ModelError::Invalid("non-finite model data".into()));
        }
        if let Some(uv) = &self.uv_coords {
            if uv.iter().any(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1])) {
                return Err(ModelError::Invalid("uv coordinate outside [0,1]^2".into()));
            }
            uv::check_non_overlapping(uv, &self.triangles).map_err(ModelError::Invalid)?;
        }
        Ok(())
    }

    pub fn template_mesh(&self) -> Mesh {
        Mesh::new(self.template.clone(), self.triangles.clone())
    }

    fn check_params(&self, beta: &IdentityParams, phi: &ExpressionParams) -> Result<(), ModelError> {
        if beta.0.len() != self.k_id {
            return Err(ModelError::ParameterShape {
                what: "identity",
                expected: self.k_id,
                got: beta.0.len(),
            });
        }
        if phi.0.len() != self.k_expr {
            return Err(ModelError::ParameterShape {
                what: "expression",
                expected: self.k_expr,
                got: phi.0.len(),
            });
        }
        if beta.0.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite("identity"));
        }
        if phi.0.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite("expression"));
        }
        Ok(())
    }

    /// Per-vertex `basis·coeffs` for a `N_v × 3 × K` basis.
    fn apply_basis(basis: &[f64], k: usize, coeffs: &[f64], out: &mut [Vec3]) {
        if k == 0 {
            return;
        }
        for (v, o) in out.iter_mut().enumerate() {
            for c in 0..3 {
                let row = &basis[(v * 3 + c) * k..(v * 3 + c + 1) * k];
                o[c] += row.iter().zip(coeffs).map(|(b, x)| b * x).sum::<f64>();
            }
        }
    }

    pub fn evaluate_mesh(
        &self,
        beta: &IdentityParams,
        phi: &ExpressionParams,
    ) -> Result<Mesh, ModelError> {
        self.check_params(beta, phi)?;
        let mut vertices = self.template.clone();
        Self::apply_basis(&self.identity_basis, self.k_id, &beta.0, &mut vertices);
        Self::apply_basis(&self.expression_basis, self.k_expr, &phi.0, &mut vertices);
        Ok(Mesh::new(vertices, self.triangles.clone()))
    }

    /// Offsets from the neutral-expression mesh of the same identity. The identity
    /// terms cancel, so this is `expression_basis·φ` regardless of β.
    pub fn neutral_expression_offsets(
        &self,
        beta: &IdentityParams,
        phi: &ExpressionParams,
    ) -> Result<Vec<Vec3>, ModelError> {
        self.check_params(beta, phi)?;
        Ok(self.expression_offsets(phi))
    }

    pub(crate) fn expression_offsets(&self, phi: &ExpressionParams) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); self.num_vertices()];
        Self::apply_basis(&self.expression_basis, self.k_expr, &phi.0, &mut out);
        out
    }

    /// The per-vertex 3-vector of expression blendshape `k`.
    pub fn expression_column(&self, k: usize) -> Vec<Vec3> {
        (0..self.num_vertices())
            .map(|v| {
                Vec3::new(
                    self.expression_basis[(v * 3) * self.k_expr + k],
                    self.expression_basis[(v * 3 + 1) * self.k_expr + k],
                    self.expression_basis[(v * 3 + 2) * self.k_expr + k],
                )
            })
            .collect()
    }

    pub fn identity_column(&self, k: usize) -> Vec<Vec3> {
        (0..self.num_vertices())
            .map(|v| {
                Vec3::new(
                    self.identity_basis[(v * 3) * self.k_id + k],
                    self.identity_basis[(v * 3 + 1) * self.k_id + k],
                    self.identity_basis[(v * 3 + 2) * self.k_id + k],
                )
            })
            .collect()
    }
}
