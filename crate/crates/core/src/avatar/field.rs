//! Expression-dependent corrective deformation on the UV grid.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AvatarError;
use crate::conditioning::encoding::{encoded_len, positional_encode_into, UV_FREQUENCIES};
use crate::math::{derive_rng, Vec3};
use crate::morphable_model::{ExpressionParams, MorphableModel, UvMesh};

pub const ENCODING_CHANNELS: usize = 2 * 2 * UV_FREQUENCIES;
pub const FIELD_INPUT_CHANNELS: usize = 3 + ENCODING_CHANNELS;
pub const DEFAULT_FIELD_HIDDEN: usize = 16;
/// Expression offsets are a few millimeters; the network sees them in centimeters.
const OFFSET_INPUT_SCALE: f64 = 100.0;
/// Network outputs are interpreted in centimeters.
const OUTPUT_SCALE: f64 = 0.01;

/// Per-UV-pixel inputs of the deformation field for one expression.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationInputs {
    pub resolution: usize,
    /// ℰ(φ) at each UV pixel (zero at invalid pixels).
    pub offsets: Vec<Vec3>,
    /// γ(2π·(u, v)), `ENCODING_CHANNELS` per pixel.
    pub encoding: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Encoding of the UV pixel centers, `res² × 24`.
pub fn uv_encoding(res: usize) -> Vec<f64> {
    let mut out = vec![0.0; res * res * ENCODING_CHANNELS];
    for row in 0..res {
        for col in 0..res {
            let uv = [(col as f64 + 0.5) / res as f64, (row as f64 + 0.5) / res as f64].map(|x| 2.0 * std::f64::consts::PI * x);
            let i = row * res + col;
            positional_encode_into(&uv, UV_FREQUENCIES, &mut out[i * ENCODING_CHANNELS..(i + 1) * ENCODING_CHANNELS]);
        }
    }
    debug_assert_eq!(ENCODING_CHANNELS, encoded_len(2, UV_FREQUENCIES));
    out
}

pub fn deformation_inputs(model: &MorphableModel, uv: &UvMesh, phi: &ExpressionParams) -> Result<DeformationInputs, AvatarError> {
    if phi.0.len() != model.k_expr {
        return Err(AvatarError::Shape { what: "expression", expected: model.k_expr, got: phi.0.len() });
    }
    let offsets = uv.interpolate(&model.expression_offsets(phi));
    Ok(DeformationInputs {
        resolution: uv.resolution,
        offsets,
        encoding: uv_encoding(uv.resolution),
        valid: uv.refs.iter().map(|r| r.is_some()).collect(),
    })
}

/// `v + D` on deformable vertices; all other vertices are copied unchanged.
pub fn apply_deformation(vertices: &[Vec3], d_uv: &[Vec3], deformable: &[bool]) -> Result<Vec<Vec3>, AvatarError> {
    if d_uv.len() != vertices.len() {
        return Err(AvatarError::Shape { what: "deformation map", expected: vertices.len(), got: d_uv.len() });
    }
    if deformable.len() != vertices.len() {
        return Err(AvatarError::Shape { what: "deformation mask", expected: vertices.len(), got: deformable.len() });
    }
    Ok(vertices.iter().zip(d_uv).zip(deformable).map(|((v, d), m)| if *m { v + d } else { *v }).collect())
}

/// A trainable map from deformation inputs to a UV deformation map in meters.
pub trait DeformationField: Send + Sync {
    fn parameters(&self) -> &[f64];
    fn parameters_mut(&mut self) -> &mut [f64];
    fn forward(&self, inputs: &DeformationInputs) -> Vec<Vec3>;
    /// ∂L/∂parameters given ∂L/∂D.
    fn backward(&self, inputs: &DeformationInputs, d_out: &[Vec3]) -> Vec<f64>;
}

/// Per-pixel MLP 27 → h → h → 3 with tanh hidden units, applied independently at
/// every valid UV pixel (a 1×1 convolution stack). The output layer starts at
/// zero so a fresh field produces no deformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpField {
    pub hidden: usize,
    pub params: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

fn layout(h: usize) -> Layout {
    let w1 = 0;
    let b1 = w1 + h * FIELD_INPUT_CHANNELS;
    let w2 = b1 + h;
    let b2 = w2 + h * h;
    let w3 = b2 + h;
    let b3 = w3 + 3 * h;
    Layout { w1, b1, w2, b2, w3, b3, end: b3 + 3 }
}

impl MlpField {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let l = layout(hidden);
        let mut params = vec![0.0; l.end];
        let mut rng = derive_rng(seed, &[0xF1E1D]);
        let a1 = (6.0 / (FIELD_INPUT_CHANNELS + hidden) as f64).sqrt();
        for p in &mut params[l.w1..l.b1] {
            *p = rng.random_range(-a1..a1);
        }
        let a2 = (6.0 / (2 * hidden) as f64).sqrt();
        for p in &mut params[l.w2..l.b2] {
            *p = rng.random_range(-a2..a2);
        }
        Self { hidden, params }
    }

    pub fn validate(&self) -> Result<(), AvatarError> {
        let expected = layout(self.hidden).end;
        if self.params.len() != expected {
            return Err(AvatarError::Shape { what: "field parameters", expected, got: self.params.len() });
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(AvatarError::NonFinite);
        }
        Ok(())
    }

    fn input(inputs: &DeformationInputs, i: usize, x: &mut [f64]) {
        let o = inputs.offsets[i] * OFFSET_INPUT_SCALE;
        x[..3].copy_from_slice(&[o.x, o.y, o.z]);
        x[3..].copy_from_slice(&inputs.encoding[i * ENCODING_CHANNELS..(i + 1) * ENCODING_CHANNELS]);
    }

    /// Hidden activations and output for one pixel.
    fn eval(&self, x: &[f64], h1: &mut [f64], h2: &mut [f64]) -> Vec3 {
        let (h, l, p) = (self.hidden, layout(self.hidden), &self.params);
        for j in 0..h {
            let row = &p[l.w1 + j * FIELD_INPUT_CHANNELS..l.w1 + (j + 1) * FIELD_INPUT_CHANNELS];
            h1[j] = (p[l.b1 + j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).tanh();
        }
        for j in 0..h {
            let row = &p[l.w2 + j * h..l.w2 + (j + 1) * h];
            h2[j] = (p[l.b2 + j] + row.iter().zip(h1.iter()).map(|(a, b)| a * b).sum::<f64>()).tanh();
        }
        let mut out = Vec3::zeros();
        for c in 0..3 {
            let row = &p[l.w3 + c * h..l.w3 + (c + 1) * h];
            out[c] = (p[l.b3 + c] + row.iter().zip(h2.iter()).map(|(a, b)| a * b).sum::<f64>()) * OUTPUT_SCALE;
        }
        out
    }
}

impl DeformationField for MlpField {
    fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, inputs: &DeformationInputs) -> Vec<Vec3> {
        let h = self.hidden;
        (0..inputs.offsets.len())
            .into_par_iter()
            .map_init(
                || (vec![0.0; FIELD_INPUT_CHANNELS], vec![0.0; h], vec![0.0; h]),
                |(x, h1, h2), i| {
                    if !inputs.valid[i] {
                        return Vec3::zeros();
                    }
                    Self::input(inputs, i, x);
                    self.eval(x, h1, h2)
                },
            )
            .collect()
    }

    fn backward(&self, inputs: &DeformationInputs, d_out: &[Vec3]) -> Vec<f64> {
        let (h, l) = (self.hidden, layout(self.hidden));
        let p = &self.params;
        let res = inputs.resolution.max(1);
        // One accumulator per UV row, summed in row order.
        let rows: Vec<Vec<f64>> = (0..inputs.offsets.len().div_ceil(res))
            .into_par_iter()
            .map(|r| {
                let mut g = vec![0.0; l.end];
                let (mut x, mut h1, mut h2) = (vec![0.0; FIELD_INPUT_CHANNELS], vec![0.0; h], vec![0.0; h]);
                let (mut g2, mut g1) = (vec![0.0; h], vec![0.0; h]);
                for i in r * res..((r + 1) * res).min(inputs.offsets.len()) {
                    let go = d_out[i] * OUTPUT_SCALE;
                    if !inputs.valid[i] || go == Vec3::zeros() {
                        continue;
                    }
                    Self::input(inputs, i, &mut x);
                    self.eval(&x, &mut h1, &mut h2);
                    g2.fill(0.0);
                    for c in 0..3 {
                        g[l.b3 + c] += go[c];
                        for j in 0..h {
                            g[l.w3 + c * h + j] += go[c] * h2[j];
                            g2[j] += go[c] * p[l.w3 + c * h + j];
                        }
                    }
                    g1.fill(0.0);
                    for j in 0..h {
                        let d = g2[j] * (1.0 - h2[j] * h2[j]);
                        g[l.b2 + j] += d;
                        for k in 0..h {
                            g[l.w2 + j * h + k] += d * h1[k];
                            g1[k] += d * p[l.w2 + j * h + k];
                        }
                    }
                    for j in 0..h {
                        let d = g1[j] * (1.0 - h1[j] * h1[j]);
                        g[l.b1 + j] += d;
                        for (k, xv) in x.iter().enumerate() {
                            g[l.w1 + j * FIELD_INPUT_CHANNELS + k] += d * xv;
                        }
                    }
                }
                g
            })
            .collect();
        let mut total = vec![0.0; l.end];
        for g in rows {
            for (a, b) in total.iter_mut().zip(g) {
                *a += b;
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable_model::synth_model;
    use crate::morphable_model::remesh_to_uv;

    #[test]
    fn inputs_follow_expression_offsets() {
        let m = synth_model(2, 1, 3, 4);
        let uv = remesh_to_uv(&m, 24).unwrap();
        let zero = deformation_inputs(&m, &uv, &ExpressionParams::zeros(4)).unwrap();
        assert!(zero.offsets.iter().all(|o| *o == Vec3::zeros()));
        assert_eq!(zero.encoding.len(), 24 * 24 * 24);
        assert_eq!(ENCODING_CHANNELS, 24);
        let phi = ExpressionParams(vec![0.5, -1.0, 0.2, 1.5]);
        let inp = deformation_inputs(&m, &uv, &phi).unwrap();
        let exact = m.expression_offsets(&phi);
        // Independent barycentric blend of the per-vertex offsets.
        for (i, r) in uv.refs.iter().enumerate().filter_map(|(i, r)| r.map(|r| (i, r))).take(50) {
            let t = m.triangles[r.triangle as usize];
            let blend = (0..3).map(|k| exact[t[k] as usize] * r.weights[k]).sum::<Vec3>();
            assert!((inp.offsets[i] - blend).norm() < 1e-15);
        }
        assert!(deformation_inputs(&m, &uv, &ExpressionParams(vec![0.0; 3])).is_err());
    }

    #[test]
    fn deformation_masking() {
        let v = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 0.0), Vec3::zeros()];
        let mut d = vec![Vec3::zeros(); 3];
        assert_eq!(apply_deformation(&v, &d, &[true; 3]).unwrap(), v);
        d[1] = Vec3::new(0.0, 0.0, 0.01);
        assert_eq!(apply_deformation(&v, &d, &[false; 3]).unwrap(), v);
        let out = apply_deformation(&v, &d, &[true; 3]).unwrap();
        assert_eq!(out[0], v[0]);
        assert_eq!(out[2], v[2]);
        assert_eq!(out[1], v[1] + Vec3::new(0.0, 0.0, 0.01));
        assert!(apply_deformation(&v, &d[..2], &[true; 3]).is_err());
    }

    #[test]
    fn fresh_field_is_zero_and_backward_matches_fd() {
        let m = synth_model(4, 1, 2, 3);
        let uv = remesh_to_uv(&m, 8).unwrap();
        let inp = deformation_inputs(&m, &uv, &ExpressionParams(vec![1.0, -0.5, 0.3])).unwrap();
        let mut f = MlpField::new(5, 1);
        assert!(f.forward(&inp).iter().all(|d| *d == Vec3::zeros()));
        let mut rng = derive_rng(9, &[]);
        for p in f.params.iter_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        let w: Vec<Vec3> = (0..64).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let loss = |f: &MlpField| f.forward(&inp).iter().zip(&w).map(|(a, b)| a.dot(b)).sum::<f64>();
        let g = f.backward(&inp, &w);
        for k in (0..f.params.len()).step_by(3) {
            let (mut p, mut q) = (f.clone(), f.clone());
            p.params[k] += 1e-6;
            q.params[k] -= 1e-6;
            let fd = (loss(&p) - loss(&q)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8 * (1.0 + fd.abs()), "{k}: {fd} vs {}", g[k]);
        }
        f.validate().unwrap();
    }
}
