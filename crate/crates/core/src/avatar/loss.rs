//! Photometric and regularization losses with their gradients.

use serde::{Deserialize, Serialize};

use super::render::SplatGrads;
use super::splats::SplatSet;
use super::AvatarError;
use crate::image::Image;
use crate::math::{quat_conj, quat_mul, quat_normalize, quat_normalize_backward, Quat, Vec3};

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
pub const L1_WEIGHT: f64 = 0.8;
pub const DSSIM_WEIGHT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AvatarLossWeights {
    pub lambda_deform: f64,
    pub lambda_rot: f64,
    pub lambda_lpips_start: f64,
    pub lambda_lpips_end: f64,
    pub lambda_lap: f64,
    pub weight_decay: f64,
    /// τ_s, local units.
    pub scaling_threshold: f64,
    /// τ_p, local units.
    pub position_threshold: f64,
}

impl Default for AvatarLossWeights {
    fn default() -> Self {
        Self {
            lambda_deform: 0.4,
            lambda_rot: 0.005,
            lambda_lpips_start: 0.0,
            lambda_lpips_end: 0.9,
            lambda_lap: 1.0,
            weight_decay: 2e-3,
            scaling_threshold: 0.6,
            position_threshold: 1.0,
        }
    }
}

impl AvatarLossWeights {
    pub fn validate(&self) -> Result<(), AvatarError> {
        let all = [self.lambda_deform, self.lambda_rot, self.lambda_lap, self.weight_decay, self.scaling_threshold, self.position_threshold];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(AvatarError::Invalid("loss weights must be finite and non-negative".into()));
        }
        for l in [self.lambda_lpips_start, self.lambda_lpips_end] {
            if !(0.0..=1.0).contains(&l) {
                return Err(AvatarError::Invalid(format!("lpips ramp endpoint {l} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Perceptual weight at `iteration` of a run with `iterations` steps; linear
    /// from the start value at iteration 0 to the end value at the last iteration.
    pub fn lambda_lpips(&self, iteration: usize, iterations: usize) -> f64 {
        if iterations <= 1 {
            return self.lambda_lpips_start;
        }
        let t = iteration.min(iterations - 1) as f64 / (iterations - 1) as f64;
        self.lambda_lpips_start + (self.lambda_lpips_end - self.lambda_lpips_start) * t
    }
}

/// Every term of the objective, as logged per iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l1: f64,
    pub ssim: f64,
    /// Zero when the perceptual branch was not evaluated.
    pub perceptual: f64,
    pub lambda_lpips: f64,
    pub rgb: f64,
    pub lap: f64,
    pub deform: f64,
    pub rot: f64,
    pub scaling: f64,
    pub position: f64,
    pub weight_decay: f64,
    pub total: f64,
}

impl LossComponents {
    pub const CSV_HEADER: &'static str = "iteration,total,rgb,l1,ssim,perceptual,lambda_lpips,lap,deform,rot,scaling,position,weight_decay";

    pub fn csv_row(&self, iteration: usize) -> String {
        format!(
            "{iteration},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.total, self.rgb, self.l1, self.ssim, self.perceptual, self.lambda_lpips, self.lap, self.deform, self.rot, self.scaling, self.position, self.weight_decay
        )
    }
}

/// ℒ = ℒ_rgb + λ_deform ℒ_deform + λ_rot ℒ_rot + ℒ_scaling + ℒ_position + λ_lap ℒ_lap + weight decay.
pub fn total_loss(c: &LossComponents, w: &AvatarLossWeights) -> f64 {
    c.rgb + w.lambda_deform * c.deform + w.lambda_rot * c.rot + c.scaling + c.position + w.lambda_lap * c.lap + c.weight_decay
}

fn ssim_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian blur with zero padding, per channel. Self-adjoint, so it
/// also serves as its own transpose in the backward pass.
fn blur(data: &[f64], h: usize, w: usize, ch: usize) -> Vec<f64> {
    let k = ssim_kernel();
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xx = x as isize + j as isize - r;
                    if xx >= 0 && (xx as usize) < w {
                        acc += kv * data[(y * w + xx as usize) * ch + c];
                    }
                }
                tmp[(y * w + x) * ch + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yy = y as isize + j as isize - r;
                    if yy >= 0 && (yy as usize) < h {
                        acc += kv * tmp[(yy as usize * w + x) * ch + c];
                    }
                }
                out[(y * w + x) * ch + c] = acc;
            }
        }
    }
    out
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, zero padding) and optionally its
/// gradient with respect to `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (h, w, ch) = a.shape();
    let n = a.data.len();
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = blur(&a.data, h, w, ch);
    let mu_b = blur(&b.data, h, w, ch);
    let e_aa = blur(&sq(&a.data, &a.data), h, w, ch);
    let e_bb = blur(&sq(&b.data, &b.data), h, w, ch);
    let e_ab = blur(&sq(&a.data, &b.data), h, w, ch);
    let mut total = 0.0;
    let (mut d_mu, mut d_aa, mut d_ab) = if want_grad { (vec![0.0; n], vec![0.0; n], vec![0.0; n]) } else { (Vec::new(), Vec::new(), Vec::new()) };
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let a1 = 2.0 * ma * mb + SSIM_C1;
        let a2 = 2.0 * (e_ab[i] - ma * mb) + SSIM_C2;
        let b1 = ma * ma + mb * mb + SSIM_C1;
        let b2 = (e_aa[i] - ma * ma) + (e_bb[i] - mb * mb) + SSIM_C2;
        let (r1, r2) = (a1 / b1, a2 / b2);
        let s = r1 * r2;
        total += s;
        if want_grad {
            // Arranged so every term cancels exactly when a == b.
            let scale = 1.0 / n as f64;
            d_mu[i] = scale * (2.0 * (mb * (a2 - a1) - s * ma * (b2 - b1)) / (b1 * b2));
            d_aa[i] = scale * (-s / b2);
            d_ab[i] = scale * (2.0 * r1 / b2);
        }
    }
    let value = total / n as f64;
    if !want_grad {
        return (value, None);
    }
    let g_mu = blur(&d_mu, h, w, ch);
    let g_aa = blur(&d_aa, h, w, ch);
    let g_ab = blur(&d_ab, h, w, ch);
    let grad = (0..n).map(|i| g_mu[i] + 2.0 * a.data[i] * g_aa[i] + b.data[i] * g_ab[i]).collect();
    (value, Some(grad))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64, AvatarError> {
    check_shapes(a, b)?;
    Ok(ssim_impl(a, b, false).0)
}

fn check_shapes(a: &Image, b: &Image) -> Result<(), AvatarError> {
    a.check_same_shape(b).map_err(|e| AvatarError::Invalid(e.to_string()))
}

/// A differentiable perceptual distance. Implementations return the gradient with
/// respect to the first (rendered) image.
pub trait PerceptualLoss: Send + Sync {
    fn loss(&self, rendered: &Image, target: &Image) -> f64 {
        self.loss_and_grad(rendered, target).0
    }
    fn loss_and_grad(&self, rendered: &Image, target: &Image) -> (f64, Image);
}

/// Network-free stand-in: L1 between gradient magnitudes over an image pyramid
/// (2×2 average pooling between levels), summed over levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientPyramidLoss {
    pub levels: usize,
}

impl Default for GradientPyramidLoss {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

const GRAD_EPS: f64 = 1e-6;

fn downsample(img: &Image) -> Image {
    let (h, w, ch) = img.shape();
    let mut out = Image::new(h / 2, w / 2, ch);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for c in 0..ch {
                let s = img.pixel(2 * y, 2 * x)[c] + img.pixel(2 * y, 2 * x + 1)[c] + img.pixel(2 * y + 1, 2 * x)[c] + img.pixel(2 * y + 1, 2 * x + 1)[c];
                out.pixel_mut(y, x)[c] = 0.25 * s;
            }
        }
    }
    out
}

fn upsample_grad(g: &Image, h: usize, w: usize) -> Image {
    let mut out = Image::new(h, w, g.channels);
    for y in 0..g.height {
        for x in 0..g.width {
            for c in 0..g.channels {
                let v = 0.25 * g.pixel(y, x)[c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    out.pixel_mut(2 * y + dy, 2 * x + dx)[c] = v;
                }
            }
        }
    }
    out
}

/// Gradient-magnitude L1 at one level; accumulates ∂/∂rendered into `grad`.
fn level_loss(r: &Image, t: &Image, grad: &mut Image) -> f64 {
    let (h, w, ch) = r.shape();
    if h < 2 || w < 2 {
        return 0.0;
    }
    let count = ((h - 1) * (w - 1) * ch) as f64;
    let mut total = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            for c in 0..ch {
                let mag = |im: &Image| {
                    let gx = im.pixel(y, x + 1)[c] - im.pixel(y, x)[c];
                    let gy = im.pixel(y + 1, x)[c] - im.pixel(y, x)[c];
                    (gx, gy, (gx * gx + gy * gy + GRAD_EPS).sqrt())
                };
                let (gx, gy, mr) = mag(r);
                let (_, _, mt) = mag(t);
                let d = mr - mt;
                total += d.abs();
                let s = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 } / count;
                let (ax, ay) = (s * gx / mr, s * gy / mr);
                grad.pixel_mut(y, x + 1)[c] += ax;
                grad.pixel_mut(y + 1, x)[c] += ay;
                grad.pixel_mut(y, x)[c] -= ax + ay;
            }
        }
    }
    total / count
}

impl PerceptualLoss for GradientPyramidLoss {
    fn loss_and_grad(&self, rendered: &Image, target: &Image) -> (f64, Image) {
        let mut rs = vec![rendered.clone()];
        let mut ts = vec![target.clone()];
        for _ in 1..self.levels {
            let (r, t) = (downsample(rs.last().unwrap()), downsample(ts.last().unwrap()));
            if r.height < 2 || r.width < 2 {
                break;
            }
            rs.push(r);
            ts.push(t);
        }
        let mut total = 0.0;
        let mut grads: Vec<Image> = rs.iter().map(|r| Image::new(r.height, r.width, r.channels)).collect();
        for l in 0..rs.len() {
            total += level_loss(&rs[l], &ts[l], &mut grads[l]);
        }
        for l in (1..rs.len()).rev() {
            let up = upsample_grad(&grads[l], rs[l - 1].height, rs[l - 1].width);
            for (a, b) in grads[l - 1].data.iter_mut().zip(&up.data) {
                *a += b;
            }
        }
        (total, grads.swap_remove(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricTerms {
    pub l1: f64,
    pub ssim: f64,
    pub perceptual: Option<f64>,
    pub value: f64,
}

/// (1 − λ)·(0.8·L1 + 0.2·(1 − SSIM)) + λ·perceptual. The perceptual branch is
/// skipped entirely when λ = 0.
pub fn photometric_loss(rendered: &Image, target: &Image, lambda_lpips: f64, perceptual: &dyn PerceptualLoss) -> Result<PhotometricTerms, AvatarError> {
    Ok(photometric_impl(rendered, target, lambda_lpips, perceptual, false)?.0)
}

pub fn photometric_loss_grad(rendered: &Image, target: &Image, lambda_lpips: f64, perceptual: &dyn PerceptualLoss) -> Result<(PhotometricTerms, Image), AvatarError> {
    let (t, g) = photometric_impl(rendered, target, lambda_lpips, perceptual, true)?;
    Ok((t, g.unwrap()))
}

fn photometric_impl(r: &Image, t: &Image, lambda: f64, perceptual: &dyn PerceptualLoss, want_grad: bool) -> Result<(PhotometricTerms, Option<Image>), AvatarError> {
    check_shapes(r, t)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(AvatarError::Invalid(format!("lambda_lpips {lambda} outside [0, 1]")));
    }
    let n = r.data.len().max(1) as f64;
    let l1 = r.data.iter().zip(&t.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let (ssim, ssim_grad) = ssim_impl(r, t, want_grad);
    let base = L1_WEIGHT * l1 + DSSIM_WEIGHT * (1.0 - ssim);
    let (perc, perc_grad) = if lambda > 0.0 {
        if want_grad {
            let (v, g) = perceptual.loss_and_grad(r, t);
            (Some(v), Some(g))
        } else {
            (Some(perceptual.loss(r, t)), None)
        }
    } else {
        (None, None)
    };
    let value = match perc {
        Some(p) => lambda * p + (1.0 - lambda) * base,
        None => base,
    };
    let grad = ssim_grad.map(|sg| {
        let mut g = Image::new(r.height, r.width, r.channels);
        for i in 0..g.data.len() {
            let d = r.data[i] - t.data[i];
            let sign = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
            g.data[i] = (1.0 - lambda) * (L1_WEIGHT * sign / n - DSSIM_WEIGHT * sg[i]);
        }
        if let Some(pg) = &perc_grad {
            for (a, b) in g.data.iter_mut().zip(&pg.data) {
                *a += lambda * b;
            }
        }
        g
    });
    Ok((PhotometricTerms { l1, ssim, perceptual: perc, value }, grad))
}

/// Regularizer values (unweighted except weight decay, which includes its factor).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Regularizers {
    pub lap: f64,
    pub deform: f64,
    pub rot: f64,
    pub scaling: f64,
    pub position: f64,
    pub weight_decay: f64,
}

/// Squared geodesic angle between two rotations and its gradient w.r.t. the
/// (unnormalized) quaternion `q`.
fn rotation_penalty(q: &Quat, q0: &Quat) -> (f64, Quat) {
    let qu = quat_normalize(q);
    let q0u = quat_normalize(q0);
    let rel = quat_mul(&quat_conj(&q0u), &qu);
    let w = rel[0];
    let n = (rel[1] * rel[1] + rel[2] * rel[2] + rel[3] * rel[3]).sqrt();
    let theta = 2.0 * n.atan2(w.abs());
    let r2 = n * n + w * w;
    // θ/n, which tends to 2/|w| as n → 0
    let ratio = if n > 1e-12 { theta / n } else { 2.0 / w.abs().max(1e-300) };
    let sign = if w >= 0.0 { 1.0 } else { -1.0 };
    let gw = sign * 2.0 * theta * (-2.0 * n / r2);
    let gv = 2.0 * ratio * (2.0 * w.abs() / r2);
    let g_rel = [gw, gv * rel[1], gv * rel[2], gv * rel[3]];
    let g_unit = quat_mul(&q0u, &g_rel);
    (theta * theta, quat_normalize_backward(q, &g_unit))
}

/// 5-point Laplacian energy Σ‖ΔD‖² over pixels whose full stencil is valid.
/// Adds ∂/∂D into `grad` when given.
pub fn laplacian_energy(d: &[Vec3], valid: &[bool], res: usize, mut grad: Option<&mut [Vec3]>) -> f64 {
    let mut total = 0.0;
    for r in 1..res.saturating_sub(1) {
        for c in 1..res - 1 {
            let i = r * res + c;
            let nb = [i - res, i + res, i - 1, i + 1];
            if !valid[i] || nb.iter().any(|&j| !valid[j]) {
                continue;
            }
            let lap = d[nb[0]] + d[nb[1]] + d[nb[2]] + d[nb[3]] - d[i] * 4.0;
            total += lap.norm_squared();
            if let Some(g) = grad.as_deref_mut() {
                for j in nb {
                    g[j] += lap * 2.0;
                }
                g[i] -= lap * 8.0;
            }
        }
    }
    total
}

/// Splat regularizers against the reference (initial) splats, plus field terms.
/// `d_uv`/`valid` may be empty when no deformation map is involved.
pub fn regularizer_losses(
    splats: &SplatSet,
    init: &SplatSet,
    d_uv: &[Vec3],
    valid: &[bool],
    res: usize,
    field_params: &[f64],
    w: &AvatarLossWeights,
) -> Regularizers {
    regularizers_impl(splats, init, d_uv, valid, res, field_params, w, None)
}

/// Accumulated gradients of the weighted regularizers.
pub struct RegularizerGrads<'a> {
    pub splats: &'a mut SplatGrads,
    pub d_uv: &'a mut [Vec3],
    pub field: &'a mut [f64],
}

/// Adds the gradient of λ_deform ℒ_deform + λ_rot ℒ_rot + ℒ_scaling + ℒ_position +
/// λ_lap ℒ_lap + weight decay into `grads` and returns the unweighted values.
#[allow(clippy::too_many_arguments)]
pub fn regularizer_grads(
    splats: &SplatSet,
    init: &SplatSet,
    d_uv: &[Vec3],
    valid: &[bool],
    res: usize,
    field_params: &[f64],
    w: &AvatarLossWeights,
    grads: RegularizerGrads<'_>,
) -> Regularizers {
    regularizers_impl(splats, init, d_uv, valid, res, field_params, w, Some(grads))
}

#[allow(clippy::too_many_arguments)]
fn regularizers_impl(
    splats: &SplatSet,
    init: &SplatSet,
    d_uv: &[Vec3],
    valid: &[bool],
    res: usize,
    field_params: &[f64],
    w: &AvatarLossWeights,
    mut grads: Option<RegularizerGrads<'_>>,
) -> Regularizers {
    let n = splats.len();
    let mut out = Regularizers::default();
    if n > 0 {
        let inv = 1.0 / n as f64;
        for i in 0..n {
            let mu = Vec3::from(splats.position[i]);
            let d = mu - Vec3::from(init.position[i]);
            out.deform += d.norm_squared() * inv;
            let (rot, g_rot) = rotation_penalty(&splats.rotation[i], &init.rotation[i]);
            out.rot += rot * inv;
            let norm = mu.norm();
            let excess = norm - w.position_threshold;
            let mut g_mu = d * (2.0 * inv * w.lambda_deform);
            if excess > 0.0 {
                out.position += excess * excess * inv;
                g_mu += mu / norm * (2.0 * excess * inv);
            }
            let mut g_s = [0.0; 3];
            for (a, gs) in g_s.iter_mut().enumerate() {
                let s = splats.log_scale[i][a].exp();
                let e = s - w.scaling_threshold;
                if e > 0.0 {
                    out.scaling += e * e * inv;
                    *gs = 2.0 * e * s * inv;
                }
            }
            if let Some(g) = grads.as_mut() {
                for a in 0..3 {
                    g.splats.position[i][a] += g_mu[a];
                    g.splats.log_scale[i][a] += g_s[a];
                }
                for a in 0..4 {
                    g.splats.rotation[i][a] += g_rot[a] * inv * w.lambda_rot;
                }
            }
        }
    }
    if !d_uv.is_empty() {
        out.lap = match grads.as_mut() {
            Some(g) if w.lambda_lap > 0.0 => {
                let mut tmp = vec![Vec3::zeros(); d_uv.len()];
                let v = laplacian_energy(d_uv, valid, res, Some(&mut tmp));
                for (a, b) in g.d_uv.iter_mut().zip(&tmp) {
                    *a += b * w.lambda_lap;
                }
                v
            }
            _ => laplacian_energy(d_uv, valid, res, None),
        };
    }
    out.weight_decay = w.weight_decay * field_params.iter().map(|p| p * p).sum::<f64>();
    if let Some(g) = grads.as_mut() {
        for (a, p) in g.field.iter_mut().zip(field_params) {
            *a += 2.0 * w.weight_decay * p;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{derive_rng, QUAT_IDENTITY};
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = derive_rng(seed, &[]);
        let mut img = Image::new(h, w, 3);
        for v in img.data.iter_mut() {
            *v = rng.random();
        }
        img
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let a = random_image(1, 12, 10);
        for lambda in [0.0, 0.3, 0.9, 1.0] {
            let t = photometric_loss(&a, &a, lambda, &GradientPyramidLoss::default()).unwrap();
            assert!(t.value.abs() < 1e-12, "{lambda}: {}", t.value);
        }
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    struct Exploding;
    impl PerceptualLoss for Exploding {
        fn loss_and_grad(&self, _: &Image, _: &Image) -> (f64, Image) {
            panic!("perceptual branch evaluated at lambda = 0")
        }
    }

    #[test]
    fn zero_lambda_skips_perceptual_branch() {
        let (a, b) = (random_image(1, 8, 8), random_image(2, 8, 8));
        let t = photometric_loss(&a, &b, 0.0, &Exploding).unwrap();
        assert_eq!(t.perceptual, None);
        assert_eq!(t.value, 0.8 * t.l1 + 0.2 * (1.0 - t.ssim));
        let (tg, _) = photometric_loss_grad(&a, &b, 0.0, &Exploding).unwrap();
        assert_eq!(tg.value, t.value);
        let (_, g) = photometric_loss_grad(&a, &a, 0.5, &GradientPyramidLoss::default()).unwrap();
        assert!(g.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lpips_ramp_endpoints() {
        let w = AvatarLossWeights::default();
        assert_eq!(w.lambda_lpips(0, 2000), 0.0);
        assert_eq!(w.lambda_lpips(1999, 2000), 0.9);
        assert!((w.lambda_lpips(999, 1999) - 0.45).abs() < 1e-15);
        assert_eq!(w.lambda_deform, 0.4);
        assert_eq!(w.lambda_rot, 0.005);
        assert_eq!(w.weight_decay, 2e-3);
    }

    /// Direct per-pixel SSIM oracle: explicit windowed sums with zero padding.
    #[test]
    fn ssim_matches_direct_window_sums() {
        let (a, b) = (random_image(3, 9, 7), random_image(4, 9, 7));
        let k = ssim_kernel();
        let mut total = 0.0;
        for y in 0..9i64 {
            for x in 0..7i64 {
                for c in 0..3 {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -5..=5i64 {
                        for dx in -5..=5i64 {
                            let (yy, xx) = (y + dy, x + dx);
                            if !(0..9).contains(&yy) || !(0..7).contains(&xx) {
                                continue;
                            }
                            let wgt = k[(dy + 5) as usize] * k[(dx + 5) as usize];
                            let (p, q) = (a.pixel(yy as usize, xx as usize)[c], b.pixel(yy as usize, xx as usize)[c]);
                            ma += wgt * p;
                            mb += wgt * q;
                            aa += wgt * p * p;
                            bb += wgt * q * q;
                            ab += wgt * p * q;
                        }
                    }
                    let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                    total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                }
            }
        }
        assert!((ssim(&a, &b).unwrap() - total / (9.0 * 7.0 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        let (a, b) = (random_image(5, 10, 9), random_image(6, 10, 9));
        let p = GradientPyramidLoss::default();
        let lambda = 0.4;
        let (_, g) = photometric_loss_grad(&a, &b, lambda, &p).unwrap();
        let h = 1e-6;
        for i in (0..a.data.len()).step_by(7) {
            let mut ap = a.clone();
            ap.data[i] += h;
            let mut am = a.clone();
            am.data[i] -= h;
            let fd = (photometric_loss(&ap, &b, lambda, &p).unwrap().value - photometric_loss(&am, &b, lambda, &p).unwrap().value) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-7, "{i}: {fd} vs {}", g.data[i]);
        }
    }

    #[test]
    fn constant_deformation_has_zero_laplacian() {
        let res = 6;
        let d = vec![Vec3::new(0.1, -0.2, 0.3); res * res];
        assert_eq!(laplacian_energy(&d, &vec![true; res * res], res, None), 0.0);
        // linear ramps are harmonic too
        let d: Vec<Vec3> = (0..res * res).map(|i| Vec3::new((i % res) as f64, (i / res) as f64, 0.0)).collect();
        assert_eq!(laplacian_energy(&d, &vec![true; res * res], res, None), 0.0);
        let mut spike = vec![Vec3::zeros(); res * res];
        spike[2 * res + 2] = Vec3::new(1.0, 0.0, 0.0);
        // centre term 16, four neighbours 1 each
        assert_eq!(laplacian_energy(&spike, &vec![true; res * res], res, None), 20.0);
    }

    fn one_splat(mu: [f64; 3]) -> SplatSet {
        let mut s = SplatSet::empty(0);
        s.push(0, mu, [-1.0; 3], QUAT_IDENTITY, [0.5; 3], 0.0);
        s
    }

    #[test]
    fn regularizers_at_init_and_hinge_example() {
        let w = AvatarLossWeights::default();
        let s = one_splat([1.1, 0.0, 0.0]);
        let r = regularizer_losses(&s, &s, &[], &[], 0, &[], &w);
        assert_eq!((r.deform, r.rot), (0.0, 0.0));
        assert!((r.position - 0.01).abs() < 1e-15);
        let t = one_splat([0.3, 0.4, 0.0]);
        assert_eq!(regularizer_losses(&t, &t, &[], &[], 0, &[], &w).position, 0.0);
        let r = regularizer_losses(&t, &t, &[], &[], 0, &[1.0, 2.0], &w);
        assert!((r.weight_decay - 2e-3 * 5.0).abs() < 1e-15);
    }

    #[test]
    fn rotation_penalty_is_squared_angle() {
        let half = 0.35f64;
        let q = [half.cos(), 0.0, 0.0, half.sin()];
        let (v, _) = rotation_penalty(&q, &QUAT_IDENTITY);
        assert!((v - (2.0 * half).powi(2)).abs() < 1e-14);
        // q and −q are the same rotation
        let (v2, _) = rotation_penalty(&q.map(|x| -x), &QUAT_IDENTITY);
        assert!((v2 - v).abs() < 1e-14);
        let (z, g) = rotation_penalty(&QUAT_IDENTITY, &QUAT_IDENTITY);
        assert_eq!(z, 0.0);
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let mut rng = derive_rng(8, &[]);
        let w = AvatarLossWeights { lambda_lap: 0.7, ..Default::default() };
        let mut s = SplatSet::empty(0);
        let mut init = SplatSet::empty(0);
        for _ in 0..4 {
            let mu = [rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), rng.random_range(-0.5..0.5)];
            let q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            s.push(0, mu, [rng.random_range(-1.5..0.0); 3], q, [0.5; 3], 0.0);
            init.push(0, [0.0, 0.1, 0.0], [0.0; 3], quat_normalize(&[1.0, 0.2, 0.0, 0.1]), [0.5; 3], 0.0);
        }
        let res = 5;
        let d: Vec<Vec3> = (0..res * res).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let valid: Vec<bool> = (0..res * res).map(|i| i != 7).collect();
        let field = vec![0.3, -0.7, 1.1];
        let f = |s: &SplatSet, d: &[Vec3], field: &[f64]| {
            let r = regularizer_losses(s, &init, d, &valid, res, field, &w);
            w.lambda_deform * r.deform + w.lambda_rot * r.rot + r.scaling + r.position + w.lambda_lap * r.lap + r.weight_decay
        };
        let mut sg = SplatGrads::zeros_like(&s);
        let mut dg = vec![Vec3::zeros(); d.len()];
        let mut fg = vec![0.0; field.len()];
        regularizer_grads(&s, &init, &d, &valid, res, &field, &w, RegularizerGrads { splats: &mut sg, d_uv: &mut dg, field: &mut fg });
        let h = 1e-6;
        let close = |an: f64, fd: f64| assert!((an - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{an} vs {fd}");
        for i in 0..4 {
            for a in 0..3 {
                let (mut p, mut m) = (s.clone(), s.clone());
                p.position[i][a] += h;
                m.position[i][a] -= h;
                close(sg.position[i][a], (f(&p, &d, &field) - f(&m, &d, &field)) / (2.0 * h));
                let (mut p, mut m) = (s.clone(), s.clone());
                p.log_scale[i][a] += h;
                m.log_scale[i][a] -= h;
                close(sg.log_scale[i][a], (f(&p, &d, &field) - f(&m, &d, &field)) / (2.0 * h));
            }
            for a in 0..4 {
                let (mut p, mut m) = (s.clone(), s.clone());
                p.rotation[i][a] += h;
                m.rotation[i][a] -= h;
                close(sg.rotation[i][a], (f(&p, &d, &field) - f(&m, &d, &field)) / (2.0 * h));
            }
        }
        for j in [6, 12, 18] {
            for a in 0..3 {
                let (mut p, mut m) = (d.clone(), d.clone());
                p[j][a] += h;
                m[j][a] -= h;
                close(dg[j][a], (f(&s, &p, &field) - f(&s, &m, &field)) / (2.0 * h));
            }
        }
        close(fg[1], 2.0 * 2e-3 * -0.7);
    }
}
