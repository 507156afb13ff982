//! Deterministic textured-mesh renderer used to produce ground-truth images.
//!
//! Surfaces are unlit (constant illumination) and colored by a smooth procedural
//! albedo looked up through the model's UV atlas. Each pixel averages an `s × s`
//! grid of sub-samples so silhouettes are antialiased; uncovered samples take the
//! background color.

use std::sync::Arc;

use super::camera::Camera;
use super::raster::rasterize;
use super::ConditioningError;
use crate::image::Image;
use crate::morphable_model::{ExpressionParams, IdentityParams, Mesh, ModelError, MorphableModel};

const SKIN: [f64; 3] = [0.86, 0.68, 0.58];
const HAIR: [f64; 3] = [0.36, 0.25, 0.19];
const EYE: [f64; 3] = [0.22, 0.22, 0.28];
const LIPS: [f64; 3] = [0.72, 0.34, 0.34];

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn blob(u: f64, v: f64, cu: f64, cv: f64, su: f64, sv: f64) -> f64 {
    (-0.5 * (((u - cu) / su).powi(2) + ((v - cv) / sv).powi(2))).exp()
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

/// Face-like albedo on the unit UV square. The face center sits at (0.5, 0.5),
/// the crown at v = 1.
pub fn procedural_albedo(u: f64, v: f64) -> [f64; 3] {
    let shade = 1.0 + 0.05 * (2.0 * std::f64::consts::PI * 3.0 * u).sin() * (std::f64::consts::PI * 4.0 * v).cos();
    let mut c = SKIN.map(|x| x * shade);
    c = mix(c, HAIR, smoothstep(0.70, 0.80, v));
    let eyes = blob(u, v, 0.445, 0.585, 0.018, 0.014) + blob(u, v, 0.555, 0.585, 0.018, 0.014);
    c = mix(c, EYE, 0.85 * eyes.min(1.0));
    c = mix(c, LIPS, 0.8 * blob(u, v, 0.5, 0.37, 0.04, 0.012));
    c
}

#[derive(Debug, Clone)]
pub struct TexturedMeshRenderer {
    pub model: Arc<MorphableModel>,
    pub supersample: usize,
    pub background: [f64; 3],
}

impl TexturedMeshRenderer {
    pub fn new(model: Arc<MorphableModel>, supersample: usize) -> Result<Self, ModelError> {
        if model.uv_coords.is_none() {
            return Err(ModelError::MissingUvAtlas);
        }
        Ok(Self { model, supersample: supersample.max(1), background: [1.0; 3] })
    }

    pub fn render(&self, beta: &IdentityParams, phi: &ExpressionParams, camera: &Camera) -> Result<Image, ConditioningError> {
        let mesh = self.model.evaluate_mesh(beta, phi)?;
        Ok(self.render_mesh(&mesh, camera))
    }

    /// Renders at the camera's own resolution.
    pub fn render_mesh(&self, mesh: &Mesh, camera: &Camera) -> Image {
        let s = self.supersample;
        let (w, h) = (camera.width, camera.height);
        let hi = camera.resized(w * s, h * s);
        let frags = rasterize(&mesh.vertices, &mesh.triangles, &hi, h * s, w * s);
        let uv = self.model.uv_coords.as_ref().expect("checked at construction");
        let mut out = Image::new(h, w, 3);
        let norm = 1.0 / (s * s) as f64;
        for row in 0..h {
            for col in 0..w {
                let mut acc = [0.0; 3];
                for sr in 0..s {
                    for sc in 0..s {
                        let idx = (row * s + sr) * w * s + col * s + sc;
                        let c = match frags.fragments[idx] {
                            None => self.background,
                            Some(f) => {
                                let tri = mesh.triangles[f.triangle as usize];
                                let mut t = [0.0; 2];
                                for k in 0..3 {
                                    let q = uv[tri[k] as usize];
                                    t[0] += f.bary[k] * q[0];
                                    t[1] += f.bary[k] * q[1];
                                }
                                procedural_albedo(t[0], t[1])
                            }
                        };
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                out.pixel_mut(row, col).copy_from_slice(&acc.map(|x| x * norm));
            }
        }
        out
    }
}
