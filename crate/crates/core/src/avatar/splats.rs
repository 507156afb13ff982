//! Splat storage, binding to triangles and initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::frame::{all_frames, TriangleFrame};
use super::sh::{num_coeffs, MAX_SH_DEGREE};
use super::AvatarError;
use crate::math::{derive_rng, quat_normalize, quat_to_mat, Mat3, Quat, Vec3, QUAT_IDENTITY};
use crate::morphable_model::Mesh;

pub const DEFAULT_SH_DEGREE: usize = 1;
/// Initial linear scale (local units) of a splat that is alone on its triangle.
/// With k the mean edge length, σ = 0.5·k covers a triangle with one Gaussian.
pub const DEFAULT_INIT_SCALE: f64 = 0.5;
pub const INIT_OPACITY: f64 = 0.5;

/// Gaussians bound to mesh triangles, stored field by field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplatSet {
    pub sh_degree: usize,
    /// Local position μ in units of the parent triangle's scale.
    pub position: Vec<[f64; 3]>,
    /// Log of the per-axis scale, local units.
    pub log_scale: Vec<[f64; 3]>,
    /// Local rotation `[w, x, y, z]`; renormalized after each optimizer step.
    pub rotation: Vec<Quat>,
    /// SH coefficients, `(splat · coeffs + l) · 3 + channel`.
    pub sh: Vec<f64>,
    /// Opacity logit.
    pub opacity: Vec<f64>,
    pub parent: Vec<u32>,
}

/// A splat placed in world space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldGaussian {
    pub position: Vec3,
    pub rotation: Mat3,
    pub scale: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitOptions {
    pub sh_degree: usize,
    /// Constant c in the initial linear scale c / n (n = splats on the triangle).
    pub scale_constant: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self { sh_degree: DEFAULT_SH_DEGREE, scale_constant: DEFAULT_INIT_SCALE }
    }
}

impl SplatSet {
    pub fn empty(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            position: Vec::new(),
            log_scale: Vec::new(),
            rotation: Vec::new(),
            sh: Vec::new(),
            opacity: Vec::new(),
            parent: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn coeffs(&self) -> usize {
        num_coeffs(self.sh_degree)
    }

    #[inline]
    pub fn sh_of(&self, i: usize) -> &[f64] {
        let n = self.coeffs() * 3;
        &self.sh[i * n..(i + 1) * n]
    }

    /// Adds a splat with the given base color and no view dependence.
    pub fn push(&mut self, parent: u32, position: [f64; 3], log_scale: [f64; 3], rotation: Quat, color: [f64; 3], opacity: f64) {
        self.parent.push(parent);
        self.position.push(position);
        self.log_scale.push(log_scale);
        self.rotation.push(rotation);
        let mut sh = vec![0.0; self.coeffs() * 3];
        for c in 0..3 {
            sh[c] = super::sh::dc_for_color(color[c]);
        }
        self.sh.extend(sh);
        self.opacity.push(opacity);
    }

    /// Copies splat `i` of `other` onto the end of `self`.
    pub fn push_from(&mut self, other: &SplatSet, i: usize) {
        self.parent.push(other.parent[i]);
        self.position.push(other.position[i]);
        self.log_scale.push(other.log_scale[i]);
        self.rotation.push(other.rotation[i]);
        self.sh.extend_from_slice(other.sh_of(i));
        self.opacity.push(other.opacity[i]);
    }

    pub fn validate(&self, num_triangles: usize) -> Result<(), AvatarError> {
        let n = self.len();
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(AvatarError::Invalid(format!("sh degree {} exceeds {MAX_SH_DEGREE}", self.sh_degree)));
        }
        if self.position.len() != n
            || self.log_scale.len() != n
            || self.rotation.len() != n
            || self.opacity.len() != n
            || self.sh.len() != n * self.coeffs() * 3
        {
            return Err(AvatarError::Invalid("splat arrays have inconsistent lengths".into()));
        }
        if let Some(p) = self.parent.iter().find(|&&p| p as usize >= num_triangles) {
            return Err(AvatarError::InvalidParent { parent: *p as usize, triangles: num_triangles });
        }
        let finite = self.position.iter().chain(&self.log_scale).flatten().chain(self.rotation.iter().flatten()).chain(&self.sh).all(|v| v.is_finite())
            && self.opacity.iter().all(|v| !v.is_nan() && *v != f64::INFINITY);
        if !finite {
            return Err(AvatarError::NonFinite);
        }
        Ok(())
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotation {
            *q = quat_normalize(q);
        }
    }
}

pub fn world_gaussian(splats: &SplatSet, i: usize, frame: &TriangleFrame) -> WorldGaussian {
    let mu = Vec3::from(splats.position[i]);
    let s = splats.log_scale[i];
    WorldGaussian {
        position: frame.origin + frame.rotation * mu * frame.scale,
        rotation: frame.rotation * quat_to_mat(&quat_normalize(&splats.rotation[i])),
        scale: Vec3::new(s[0].exp(), s[1].exp(), s[2].exp()) * frame.scale,
    }
}

/// Frames of the triangles referenced by `splats`, erroring on bad parents.
pub(crate) fn parent_frames(splats: &SplatSet, mesh: &Mesh) -> Result<Vec<Option<TriangleFrame>>, AvatarError> {
    let nt = mesh.triangles.len();
    if let Some(p) = splats.parent.iter().find(|&&p| p as usize >= nt) {
        return Err(AvatarError::InvalidParent { parent: *p as usize, triangles: nt });
    }
    let frames = all_frames(&mesh.vertices, &mesh.triangles);
    if let Some(&p) = splats.parent.iter().find(|&&p| frames[p as usize].is_none()) {
        return Err(AvatarError::DegenerateTriangle(p as usize));
    }
    Ok(frames)
}

pub fn splat_world_state(splats: &SplatSet, mesh: &Mesh) -> Result<Vec<WorldGaussian>, AvatarError> {
    let frames = parent_frames(splats, mesh)?;
    Ok((0..splats.len()).map(|i| world_gaussian(splats, i, frames[splats.parent[i] as usize].as_ref().unwrap())).collect())
}

/// Largest-remainder apportionment of `total` proportional to `weights`.
/// Ties in the remainder go to the lower index.
pub fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().filter(|w| **w > 0.0).sum();
    if sum <= 0.0 || total == 0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| if *w > 0.0 { total as f64 * w / sum } else { 0.0 }).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub fn init_splats(mesh: &Mesh, total_count: usize, seed: u64) -> Result<SplatSet, AvatarError> {
    init_splats_with(mesh, total_count, seed, &InitOptions::default())
}

/// Area-proportional placement: uniform positions inside each triangle, identity
/// rotation, opacity 0.5, gray color and isotropic scale `c / n`.
pub fn init_splats_with(mesh: &Mesh, total_count: usize, seed: u64, opts: &InitOptions) -> Result<SplatSet, AvatarError> {
    if opts.sh_degree > MAX_SH_DEGREE {
        return Err(AvatarError::Invalid(format!("sh degree {} exceeds {MAX_SH_DEGREE}", opts.sh_degree)));
    }
    let frames = all_frames(&mesh.vertices, &mesh.triangles);
    let areas: Vec<f64> = (0..mesh.triangles.len()).map(|t| if frames[t].is_some() { mesh.triangle_area(t) } else { 0.0 }).collect();
    let counts = apportion(&areas, total_count);
    let mut rng = derive_rng(seed, &[0x1417]);
    let mut out = SplatSet::empty(opts.sh_degree);
    let opacity = crate::math::logit(INIT_OPACITY);
    for (t, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let f = frames[t].as_ref().unwrap();
        let [a, b, c] = mesh.triangle_vertices(t);
        let ls = (opts.scale_constant / n as f64).ln();
        for _ in 0..n {
            let r1: f64 = rng.random::<f64>().sqrt();
            let r2: f64 = rng.random();
            let p = a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2);
            let mu = f.rotation.transpose() * (p - f.origin) / f.scale;
            out.push(t as u32, [mu.x, mu.y, mu.z], [ls; 3], QUAT_IDENTITY, [0.5; 3], opacity);
        }
    }
    Ok(out)
}
