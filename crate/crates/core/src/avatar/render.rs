//! EWA splatting with front-to-back compositing, and its exact backward pass.
//!
//! Pixels are processed in 16-row bands in parallel. Each band writes only its own
//! rows and, in the backward pass, accumulates into its own buffer; buffers are then
//! summed in band order, so results do not depend on thread scheduling.

use nalgebra::{Matrix2, Matrix2x3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::frame::{frame_backward, FrameGrad, TriangleFrame};
use super::sh;
use super::splats::{parent_frames, SplatSet};
use super::AvatarError;
use crate::conditioning::Camera;
use crate::image::Image;
use crate::math::{normalize_backward, quat_normalize, quat_normalize_backward, quat_to_mat, quat_to_mat_backward, sigmoid, Mat3, Quat, Vec3};
use crate::morphable_model::Mesh;

const BAND: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// Isotropic variance (px²) added to every projected covariance.
    pub dilation: f64,
    /// Per-pixel weights below this are skipped.
    pub alpha_cutoff: f64,
    pub max_alpha: f64,
    /// Splats closer than this camera-space depth are culled.
    pub near: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { background: [1.0; 3], dilation: 0.3, alpha_cutoff: 0.01, max_alpha: 0.99, near: 0.01 }
    }
}

impl RenderSettings {
    pub fn with_background(background: [f64; 3]) -> Self {
        Self { background, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    /// Transmittance left after the last splat, per pixel.
    pub transmittance: Vec<f64>,
    /// Σ αᵢTᵢ per pixel.
    pub weight_sum: Vec<f64>,
}

/// Gradients with respect to every stored splat parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrads {
    pub position: Vec<[f64; 3]>,
    pub log_scale: Vec<[f64; 3]>,
    pub rotation: Vec<Quat>,
    pub sh: Vec<f64>,
    pub opacity: Vec<f64>,
    /// |∂L/∂(projected mean)| in pixels, used to trigger densification.
    pub screen_grad: Vec<f64>,
}

impl SplatGrads {
    pub fn zeros_like(s: &SplatSet) -> Self {
        let n = s.len();
        Self {
            position: vec![[0.0; 3]; n],
            log_scale: vec![[0.0; 3]; n],
            rotation: vec![[0.0; 4]; n],
            sh: vec![0.0; s.sh.len()],
            opacity: vec![0.0; n],
            screen_grad: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Projected {
    index: usize,
    mean: [f64; 2],
    /// Inverse 2D covariance (a, b, c) for [[a, b], [b, c]].
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    /// Pixel rect x0..x1, y0..y1 (exclusive ends).
    rect: [usize; 4],
}

/// Everything about a splat's projection that the backward pass re-derives.
struct Geometry {
    mu: Vec3,
    p: Vec3,
    q_unit: Quat,
    rq: Mat3,
    s_diag: Vec3,
    n: Mat3,
    m: Mat3,
    t: Vec3,
    j: Matrix2x3<f64>,
    x: Mat3,
    cov2: Matrix2<f64>,
    view: Vec3,
    view_local: Vec3,
    basis: [f64; 9],
    color_raw: [f64; 3],
}

fn geometry(splats: &SplatSet, i: usize, f: &TriangleFrame, cam: &Camera, center: &Vec3, s: &RenderSettings) -> Option<Geometry> {
    let mu = Vec3::from(splats.position[i]);
    let p = f.origin + f.rotation * mu * f.scale;
    let t = cam.to_camera(&p);
    if !(t.z > s.near) {
        return None;
    }
    let q_unit = quat_normalize(&splats.rotation[i]);
    let rq = quat_to_mat(&q_unit);
    let ls = splats.log_scale[i];
    let s_diag = Vec3::new(ls[0].exp(), ls[1].exp(), ls[2].exp()) * f.scale;
    let n = rq * Mat3::from_diagonal(&s_diag);
    let m = f.rotation * n;
    let sigma = m * m.transpose();
    let w = &cam.rotation;
    let x = w * sigma * w.transpose();
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / t.z;
    let j = Matrix2x3::new(fx * iz, 0.0, -fx * t.x * iz * iz, 0.0, fy * iz, -fy * t.y * iz * iz);
    let cov2 = j * x * j.transpose() + Matrix2::identity() * s.dilation;
    let d = p - center;
    let view = d.normalize();
    let view_local = f.rotation.transpose() * view;
    let mut basis = [0.0; 9];
    sh::basis(splats.sh_degree, &view_local, &mut basis);
    let nc = splats.coeffs();
    let coef = splats.sh_of(i);
    let mut color_raw = [0.5; 3];
    for l in 0..nc {
        for (c, out) in color_raw.iter_mut().enumerate() {
            *out += coef[l * 3 + c] * basis[l];
        }
    }
    Some(Geometry { mu, p, q_unit, rq, s_diag, n, m, t, j, x, cov2, view, view_local, basis, color_raw })
}

fn project(splats: &SplatSet, i: usize, f: &TriangleFrame, cam: &Camera, center: &Vec3, s: &RenderSettings) -> Option<Projected> {
    let opacity = sigmoid(splats.opacity[i]);
    if !(opacity >= s.alpha_cutoff) {
        return None;
    }
    let g = geometry(splats, i, f, cam, center, s)?;
    let (a, b, c) = (g.cov2[(0, 0)], g.cov2[(0, 1)], g.cov2[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let mean = [cam.fx * g.t.x / g.t.z + cam.cx, cam.fy * g.t.y / g.t.z + cam.cy];
    // Exact support of weight ≥ cutoff: Mahalanobis² ≤ 2·ln(opacity / cutoff).
    let mid = 0.5 * (a + c);
    let lambda = mid + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let radius = (lambda * 2.0 * (opacity / s.alpha_cutoff).ln()).max(0.0).sqrt() + 1e-6;
    let lo = |m: f64, size: usize| ((m - radius - 0.5).ceil().max(0.0) as usize).min(size);
    let hi = |m: f64, size: usize| (((m + radius - 0.5).floor() + 1.0).max(0.0) as usize).min(size);
    let rect = [lo(mean[0], cam.width), hi(mean[0], cam.width), lo(mean[1], cam.height), hi(mean[1], cam.height)];
    if !mean[0].is_finite() || !mean[1].is_finite() || rect[0] >= rect[1] || rect[2] >= rect[3] {
        return None;
    }
    Some(Projected {
        index: i,
        mean,
        conic,
        opacity,
        color: g.color_raw.map(|v| v.max(0.0)),
        depth: g.t.z,
        rect,
    })
}

struct Prepared {
    frames: Vec<Option<TriangleFrame>>,
    projected: Vec<Projected>,
    /// Per band, indices into `projected` in depth order.
    bands: Vec<Vec<u32>>,
}

fn prepare(splats: &SplatSet, mesh: &Mesh, cam: &Camera, s: &RenderSettings) -> Result<Prepared, AvatarError> {
    cam.validate().map_err(|e| AvatarError::Invalid(e.to_string()))?;
    let frames = parent_frames(splats, mesh)?;
    let center = cam.center();
    let mut projected: Vec<Projected> = (0..splats.len())
        .into_par_iter()
        .filter_map(|i| project(splats, i, frames[splats.parent[i] as usize].as_ref().unwrap(), cam, &center, s))
        .collect();
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let n_bands = cam.height.div_ceil(BAND);
    let mut bands = vec![Vec::new(); n_bands];
    for (k, p) in projected.iter().enumerate() {
        for band in bands.iter_mut().take((p.rect[3] - 1) / BAND + 1).skip(p.rect[2] / BAND) {
            band.push(k as u32);
        }
    }
    Ok(Prepared { frames, projected, bands })
}

#[derive(Clone, Copy)]
struct Hit {
    k: u32,
    alpha: f64,
    gauss: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
    trans: f64,
}

#[inline]
fn evaluate(p: &Projected, px: f64, py: f64, s: &RenderSettings) -> Option<(f64, f64, f64, f64, bool)> {
    let dx = px - p.mean[0];
    let dy = py - p.mean[1];
    let power = -0.5 * (p.conic[0] * dx * dx + p.conic[2] * dy * dy) - p.conic[1] * dx * dy;
    if power > 0.0 {
        return None;
    }
    let g = power.exp();
    let a = p.opacity * g;
    if a < s.alpha_cutoff {
        return None;
    }
    if a > s.max_alpha {
        Some((s.max_alpha, g, dx, dy, true))
    } else {
        Some((a, g, dx, dy, false))
    }
}

/// Walks the band list for one pixel, front to back.
#[inline]
fn composite_pixel(prep: &Prepared, list: &[u32], col: usize, row: usize, s: &RenderSettings, hits: &mut Vec<Hit>) -> f64 {
    hits.clear();
    let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
    let mut trans = 1.0;
    for &k in list {
        let p = &prep.projected[k as usize];
        if col < p.rect[0] || col >= p.rect[1] || row < p.rect[2] || row >= p.rect[3] {
            continue;
        }
        if let Some((alpha, gauss, dx, dy, clamped)) = evaluate(p, px, py, s) {
            hits.push(Hit { k, alpha, gauss, dx, dy, clamped, trans });
            trans *= 1.0 - alpha;
        }
    }
    trans
}

pub fn render_splats(splats: &SplatSet, mesh: &Mesh, camera: &Camera, height: usize, width: usize, background: [f64; 3]) -> Result<Image, AvatarError> {
    let cam = sized(camera, height, width);
    Ok(render_detailed(splats, mesh, &cam, &RenderSettings::with_background(background))?.image)
}

fn sized(camera: &Camera, height: usize, width: usize) -> Camera {
    if camera.width == width && camera.height == height {
        camera.clone()
    } else {
        camera.resized(width, height)
    }
}

/// Renders at the camera's own resolution and also returns per-pixel
/// transmittance and accumulated weight.
pub fn render_detailed(splats: &SplatSet, mesh: &Mesh, camera: &Camera, s: &RenderSettings) -> Result<RenderOutput, AvatarError> {
    let prep = prepare(splats, mesh, camera, s)?;
    let (h, w) = (camera.height, camera.width);
    let mut image = Image::new(h, w, 3);
    let mut transmittance = vec![0.0; h * w];
    let mut weight_sum = vec![0.0; h * w];
    image
        .data
        .par_chunks_mut(BAND * w * 3)
        .zip(transmittance.par_chunks_mut(BAND * w))
        .zip(weight_sum.par_chunks_mut(BAND * w))
        .enumerate()
        .for_each(|(b, ((img, tr), ws))| {
            let list = &prep.bands[b];
            let mut hits = Vec::new();
            for r in 0..tr.len() / w {
                let row = b * BAND + r;
                for col in 0..w {
                    let t_final = composite_pixel(&prep, list, col, row, s, &mut hits);
                    let mut c = [0.0; 3];
                    let mut wsum = 0.0;
                    for hit in &hits {
                        let p = &prep.projected[hit.k as usize];
                        let wgt = hit.alpha * hit.trans;
                        wsum += wgt;
                        for ch in 0..3 {
                            c[ch] += p.color[ch] * wgt;
                        }
                    }
                    let o = (r * w + col) * 3;
                    for ch in 0..3 {
                        img[o + ch] = c[ch] + t_final * s.background[ch];
                    }
                    tr[r * w + col] = t_final;
                    ws[r * w + col] = wsum;
                }
            }
        });
    Ok(RenderOutput { image, transmittance, weight_sum })
}

/// Per pixel, the contributing splats in order, with their α-cap and
/// color-clamp flags. Used to detect where the loss is not differentiable.
pub fn contribution_signature(splats: &SplatSet, mesh: &Mesh, camera: &Camera, s: &RenderSettings) -> Result<Vec<(u32, u32, bool)>, AvatarError> {
    let prep = prepare(splats, mesh, camera, s)?;
    let mut out = Vec::new();
    let mut hits = Vec::new();
    for row in 0..camera.height {
        let list = &prep.bands[row / BAND];
        for col in 0..camera.width {
            composite_pixel(&prep, list, col, row, s, &mut hits);
            for hit in &hits {
                let p = &prep.projected[hit.k as usize];
                out.push(((row * camera.width + col) as u32, p.index as u32, hit.clamped));
            }
        }
    }
    // color clamping depends on the view only through the splat, not the pixel
    let center = camera.center();
    for p in &prep.projected {
        let f = prep.frames[splats.parent[p.index] as usize].as_ref().unwrap();
        let g = geometry(splats, p.index, f, camera, &center, s).unwrap();
        let mask = g.color_raw.iter().enumerate().map(|(c, v)| ((*v < 0.0) as u32) << c).sum::<u32>();
        out.push((u32::MAX, p.index as u32, mask != 0));
        out.push((u32::MAX - 1, mask, false));
    }
    Ok(out)
}

/// Per-splat gradients w.r.t. projected quantities: mean (2), conic (3), opacity, color (3).
type Grad2d = [f64; 9];

/// Backpropagates `d_image` (∂L/∂pixel) to splat parameters and to mesh vertices.
pub fn render_backward(splats: &SplatSet, mesh: &Mesh, camera: &Camera, s: &RenderSettings, d_image: &Image) -> Result<(SplatGrads, Vec<Vec3>), AvatarError> {
    let (h, w) = (camera.height, camera.width);
    if d_image.shape() != (h, w, 3) {
        return Err(AvatarError::Invalid(format!("gradient image {:?} does not match camera {h}×{w}×3", d_image.shape())));
    }
    let prep = prepare(splats, mesh, camera, s)?;
    let np = prep.projected.len();
    let band_grads: Vec<Vec<Grad2d>> = d_image
        .data
        .par_chunks(BAND * w * 3)
        .enumerate()
        .map(|(b, dimg)| {
            let list = &prep.bands[b];
            let mut acc = vec![[0.0; 9]; np];
            let mut hits = Vec::new();
            for r in 0..dimg.len() / (w * 3) {
                let row = b * BAND + r;
                for col in 0..w {
                    let o = (r * w + col) * 3;
                    let gpix = [dimg[o], dimg[o + 1], dimg[o + 2]];
                    if gpix == [0.0; 3] {
                        continue;
                    }
                    composite_pixel(&prep, list, col, row, s, &mut hits);
                    let mut rest = s.background;
                    for hit in hits.iter().rev() {
                        let p = &prep.projected[hit.k as usize];
                        let g = &mut acc[hit.k as usize];
                        let wgt = hit.alpha * hit.trans;
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            g[6 + ch] += wgt * gpix[ch];
                            d_alpha += hit.trans * (p.color[ch] - rest[ch]) * gpix[ch];
                            rest[ch] = hit.alpha * p.color[ch] + (1.0 - hit.alpha) * rest[ch];
                        }
                        if hit.clamped {
                            continue;
                        }
                        g[5] += d_alpha * hit.gauss;
                        let d_power = d_alpha * hit.alpha;
                        let (dx, dy) = (hit.dx, hit.dy);
                        g[0] += d_power * (p.conic[0] * dx + p.conic[1] * dy);
                        g[1] += d_power * (p.conic[1] * dx + p.conic[2] * dy);
                        g[2] += -0.5 * dx * dx * d_power;
                        g[3] += -dx * dy * d_power;
                        g[4] += -0.5 * dy * dy * d_power;
                    }
                }
            }
            acc
        })
        .collect();
    let mut g2d = vec![[0.0; 9]; np];
    for band in &band_grads {
        for (a, b) in g2d.iter_mut().zip(band) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    let center = camera.center();
    let per_splat: Vec<(usize, LocalGrad, FrameGrad)> = prep
        .projected
        .par_iter()
        .zip(&g2d)
        .map(|(p, g)| {
            let f = prep.frames[splats.parent[p.index] as usize].as_ref().unwrap();
            let (lg, fg) = splat_backward(splats, p.index, f, camera, &center, s, g);
            (p.index, lg, fg)
        })
        .collect();

    let mut grads = SplatGrads::zeros_like(splats);
    let mut frame_grads = vec![FrameGrad::default(); mesh.triangles.len()];
    let nsh = splats.coeffs() * 3;
    let mut order: Vec<usize> = (0..per_splat.len()).collect();
    order.sort_by_key(|&k| per_splat[k].0);
    for k in order {
        let (i, lg, fg) = &per_splat[k];
        let i = *i;
        grads.position[i] = lg.position.into();
        grads.log_scale[i] = lg.log_scale.into();
        grads.rotation[i] = lg.rotation;
        grads.sh[i * nsh..(i + 1) * nsh].copy_from_slice(&lg.sh[..nsh]);
        grads.opacity[i] = lg.opacity;
        grads.screen_grad[i] = lg.screen;
        frame_grads[splats.parent[i] as usize].add(fg);
    }
    let mut vgrad = vec![Vec3::zeros(); mesh.vertices.len()];
    for (t, fg) in frame_grads.iter().enumerate() {
        if prep.frames[t].is_none() || *fg == FrameGrad::default() {
            continue;
        }
        let tri = mesh.triangles[t];
        let [a, b, c] = mesh.triangle_vertices(t);
        let gv = frame_backward(&a, &b, &c, fg);
        for (v, g) in tri.iter().zip(gv) {
            vgrad[*v as usize] += g;
        }
    }
    Ok((grads, vgrad))
}

struct LocalGrad {
    position: Vec3,
    log_scale: Vec3,
    rotation: Quat,
    sh: [f64; 27],
    opacity: f64,
    screen: f64,
}

#[allow(clippy::too_many_arguments)]
fn splat_backward(splats: &SplatSet, i: usize, f: &TriangleFrame, cam: &Camera, center: &Vec3, s: &RenderSettings, g: &Grad2d) -> (LocalGrad, FrameGrad) {
    let geo = geometry(splats, i, f, cam, center, s).expect("projected splats have geometry");
    let mut fg = FrameGrad::default();
    let mut g_p = Vec3::zeros();

    // color → SH coefficients and view direction
    let nc = splats.coeffs();
    let coef = splats.sh_of(i);
    let mut sh_grad = [0.0; 27];
    let mut g_basis = [0.0; 9];
    for ch in 0..3 {
        if geo.color_raw[ch] < 0.0 {
            continue;
        }
        let gc = g[6 + ch];
        for l in 0..nc {
            sh_grad[l * 3 + ch] = gc * geo.basis[l];
            g_basis[l] += gc * coef[l * 3 + ch];
        }
    }
    if splats.sh_degree > 0 {
        let g_local = sh::basis_backward(splats.sh_degree, &geo.view_local, &g_basis);
        let g_view = f.rotation * g_local;
        fg.rotation += geo.view * g_local.transpose();
        g_p += normalize_backward(&(geo.p - center), &g_view);
    }

    let opac = sigmoid(splats.opacity[i]);
    let g_opacity = g[5] * opac * (1.0 - opac);

    // conic → 2D covariance
    let q = Matrix2::new(
        geo.cov2[(1, 1)],
        -geo.cov2[(0, 1)],
        -geo.cov2[(1, 0)],
        geo.cov2[(0, 0)],
    ) / (geo.cov2[(0, 0)] * geo.cov2[(1, 1)] - geo.cov2[(0, 1)] * geo.cov2[(1, 0)]);
    let g_q = Matrix2::new(g[2], 0.5 * g[3], 0.5 * g[3], g[4]);
    let g_cov2 = -(q * g_q * q);
    let g_x = geo.j.transpose() * g_cov2 * geo.j;
    let g_j = 2.0 * g_cov2 * geo.j * geo.x;
    let w = &cam.rotation;
    let g_sigma = w.transpose() * g_x * w;
    let g_m = 2.0 * g_sigma * geo.m;
    fg.rotation += g_m * geo.n.transpose();
    let g_n = f.rotation.transpose() * g_m;
    let mut g_rq = g_n;
    let mut g_sdiag = Vec3::zeros();
    for col in 0..3 {
        for row in 0..3 {
            g_sdiag[col] += g_n[(row, col)] * geo.rq[(row, col)];
            g_rq[(row, col)] *= geo.s_diag[col];
        }
    }
    let log_scale = g_sdiag.component_mul(&geo.s_diag);
    fg.scale += log_scale.sum() / f.scale;
    let rotation = quat_normalize_backward(&splats.rotation[i], &quat_to_mat_backward(&geo.q_unit, &g_rq));

    // projection of the mean and the Jacobian's dependence on t
    let (fx, fy) = (cam.fx, cam.fy);
    let t = geo.t;
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let mut g_t = Vec3::new(g[0] * fx * iz, g[1] * fy * iz, -(g[0] * fx * t.x + g[1] * fy * t.y) * iz2);
    g_t.x += g_j[(0, 2)] * (-fx * iz2);
    g_t.y += g_j[(1, 2)] * (-fy * iz2);
    g_t.z += g_j[(0, 0)] * (-fx * iz2) + g_j[(0, 2)] * (2.0 * fx * t.x * iz2 * iz) + g_j[(1, 1)] * (-fy * iz2) + g_j[(1, 2)] * (2.0 * fy * t.y * iz2 * iz);
    g_p += w.transpose() * g_t;

    // p = o + k·R·μ
    let r_mu = f.rotation * geo.mu;
    fg.origin += g_p;
    fg.scale += g_p.dot(&r_mu);
    fg.rotation += g_p * geo.mu.transpose() * f.scale;
    let position = f.rotation.transpose() * g_p * f.scale;

    let lg = LocalGrad {
        position,
        log_scale,
        rotation,
        sh: sh_grad,
        opacity: g_opacity,
        screen: (g[0] * g[0] + g[1] * g[1]).sqrt(),
    };
    (lg, fg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{derive_rng, rot_from_axis_angle, QUAT_IDENTITY};
    use rand::Rng;
    use std::sync::Arc;

    /// Triangle with identity frame (centroid 0, R = I, k = 1).
    pub(crate) fn unit_frame_mesh() -> Mesh {
        let h = 3f64.sqrt() / 2.0;
        Mesh::new(
            vec![Vec3::new(-0.5, 0.0, h / 3.0), Vec3::new(0.5, 0.0, h / 3.0), Vec3::new(0.0, 0.0, -2.0 * h / 3.0)],
            Arc::new(vec![[0, 1, 2]]),
        )
    }

    fn cam(size: usize, z: f64) -> Camera {
        Camera::new(40.0, 40.0, size as f64 / 2.0, size as f64 / 2.0, Mat3::identity(), Vec3::new(0.0, 0.0, z), size, size).unwrap()
    }

    #[test]
    fn empty_and_transparent_sets_render_background() {
        let m = unit_frame_mesh();
        let bg = [0.2, 0.4, 0.9];
        let img = render_splats(&SplatSet::empty(1), &m, &cam(16, 2.0), 16, 16, bg).unwrap();
        assert!(img.data.chunks(3).all(|p| p == bg));
        let mut s = SplatSet::empty(1);
        for k in 0..5 {
            s.push(0, [0.0, 0.0, k as f64 * 0.01], [-2.0; 3], QUAT_IDENTITY, [0.0; 3], f64::NEG_INFINITY);
        }
        let img = render_splats(&s, &m, &cam(16, 2.0), 16, 16, bg).unwrap();
        assert!(img.data.chunks(3).all(|p| p == bg));
    }

    #[test]
    fn single_gaussian_has_peak_at_principal_point_and_radial_falloff() {
        let m = unit_frame_mesh();
        let mut s = SplatSet::empty(0);
        s.push(0, [0.0; 3], [(0.1f64).ln(); 3], QUAT_IDENTITY, [1.0; 3], crate::math::logit(0.9));
        let c = Camera { cx: 16.5, cy: 16.5, ..cam(33, 2.0) };
        let img = render_splats(&s, &m, &c, 33, 33, [0.0; 3]).unwrap();
        let v = |r: usize, col: usize| img.pixel(r, col)[0];
        let peak = v(16, 16);
        let max = img.data.iter().cloned().fold(0.0, f64::max);
        assert_eq!(peak, max);
        assert!((peak - 0.9).abs() < 1e-12);
        // Oracle: the 2D footprint is isotropic with σ² = (f·σ/z)² + dilation.
        let var = (40.0 * 0.1 / 2.0f64).powi(2) + 0.3;
        for d in 1..8 {
            let expect = 0.9 * (-0.5 * (d * d) as f64 / var).exp();
            let got = v(16, 16 + d);
            assert!(got <= v(16, 16 + d - 1));
            if expect >= 0.01 {
                assert!((got - expect).abs() < 1e-12, "{d}: {got} vs {expect}");
            } else {
                assert_eq!(got, 0.0);
            }
            assert_eq!(got, v(16 + d, 16));
            assert_eq!(got, v(16 - d, 16));
        }
    }

    fn random_scene(seed: u64, n: usize) -> (SplatSet, Mesh, Camera) {
        let mut rng = derive_rng(seed, &[]);
        let mesh = Mesh::new(
            (0..6).map(|_| Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2))).collect(),
            Arc::new(vec![[0, 1, 2], [3, 4, 5]]),
        );
        let mut s = SplatSet::empty(2);
        for _ in 0..n {
            s.push(
                rng.random_range(0..2),
                [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
                [rng.random_range(-2.5..-0.5), rng.random_range(-2.5..-0.5), rng.random_range(-2.5..-0.5)],
                quat_normalize(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
                [rng.random(), rng.random(), rng.random()],
                rng.random_range(-2.0..3.0),
            );
        }
        for v in s.sh.iter_mut().skip(3) {
            *v += rng.random_range(-0.2..0.2);
        }
        let r = rot_from_axis_angle(&Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0));
        let c = Camera::new(30.0, 30.0, 12.0, 12.0, r, Vec3::new(0.0, 0.0, 1.5), 24, 24).unwrap();
        (s, mesh, c)
    }

    #[test]
    fn compositing_conserves_weight() {
        for seed in 0..10 {
            let (s, m, c) = random_scene(seed, 30);
            let out = render_detailed(&s, &m, &c, &RenderSettings::default()).unwrap();
            for (t, w) in out.transmittance.iter().zip(&out.weight_sum) {
                assert!((t + w - 1.0).abs() < 1e-6);
            }
            assert!(out.weight_sum.iter().any(|w| *w > 0.5));
        }
    }

    #[test]
    fn rigid_motion_of_mesh_and_camera_leaves_image_unchanged() {
        for seed in 0..5 {
            let (s, m, c) = random_scene(seed, 30);
            let r = rot_from_axis_angle(&Vec3::new(0.4, -0.9, 1.3));
            let t = Vec3::new(0.5, -1.0, 2.0);
            let a = render_splats(&s, &m, &c, 24, 24, [0.3, 0.3, 0.3]).unwrap();
            let b = render_splats(&s, &m.transformed(&r, &t), &c.after_world_transform(&r, &t), 24, 24, [0.3, 0.3, 0.3]).unwrap();
            let err = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn render_is_deterministic_across_thread_counts() {
        let (s, m, c) = random_scene(7, 60);
        let a = render_splats(&s, &m, &c, 24, 24, [1.0; 3]).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| render_splats(&s, &m, &c, 24, 24, [1.0; 3]).unwrap());
        assert_eq!(a, b);
        let d = Image::filled(24, 24, 3, 0.1);
        let ga = render_backward(&s, &m, &c, &RenderSettings::default(), &d).unwrap();
        let gb = pool.install(|| render_backward(&s, &m, &c, &RenderSettings::default(), &d).unwrap());
        assert_eq!(ga, gb);
    }

    fn linear_loss(s: &SplatSet, m: &Mesh, c: &Camera, d: &Image) -> f64 {
        let out = render_detailed(s, m, c, &RenderSettings::default()).unwrap();
        out.image.data.iter().zip(&d.data).map(|(a, b)| a * b).sum()
    }

    /// Central difference at a fixed step.
    fn check(name: &str, an: f64, f: &dyn Fn(f64) -> f64, tol: f64) {
        let h = 1e-6;
        let fd = (f(h) - f(-h)) / (2.0 * h);
        let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        assert!(err < tol, "{name}: analytic {an} vs fd {fd} (rel {err})");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (s, m, c) = random_scene(11, 6);
        let mut rng = derive_rng(5, &[]);
        let mut d = Image::new(24, 24, 3);
        for v in d.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let (g, gv) = render_backward(&s, &m, &c, &RenderSettings::default(), &d).unwrap();
        assert!(g.opacity.iter().filter(|x| x.abs() > 1e-3).count() >= 4, "{:?}", g.opacity);
        assert!(g.position.iter().flatten().filter(|x| x.abs() > 1e-3).count() >= 8);
        assert!(gv.iter().all(|v| v.norm() > 1e-4));
        for i in 0..s.len() {
            for a in 0..3 {
                let f = |h: f64| {
                    let mut t = s.clone();
                    t.position[i][a] += h;
                    linear_loss(&t, &m, &c, &d)
                };
                check("position", g.position[i][a], &f, 1e-4);
                let f = |h: f64| {
                    let mut t = s.clone();
                    t.log_scale[i][a] += h;
                    linear_loss(&t, &m, &c, &d)
                };
                check("scale", g.log_scale[i][a], &f, 1e-4);
            }
            for a in 0..4 {
                let f = |h: f64| {
                    let mut t = s.clone();
                    t.rotation[i][a] += h;
                    linear_loss(&t, &m, &c, &d)
                };
                check("rotation", g.rotation[i][a], &f, 1e-4);
            }
            let f = |h: f64| {
                let mut t = s.clone();
                t.opacity[i] += h;
                linear_loss(&t, &m, &c, &d)
            };
            check("opacity", g.opacity[i], &f, 1e-5);
            for l in 0..s.coeffs() * 3 {
                let f = |h: f64| {
                    let mut t = s.clone();
                    t.sh[i * 27 + l] += h;
                    linear_loss(&t, &m, &c, &d)
                };
                check("sh", g.sh[i * 27 + l], &f, 1e-5);
            }
        }
        for v in 0..m.vertices.len() {
            for a in 0..3 {
                let f = |h: f64| {
                    let mut t = m.clone();
                    t.vertices[v][a] += h;
                    linear_loss(&s, &t, &c, &d)
                };
                check("vertex", gv[v][a], &f, 1e-4);
            }
        }
    }
}
