//! Finite-difference verification of the renderer and loss gradients.

use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::Rng;

use super::loss::{photometric_loss_grad, regularizer_grads, regularizer_losses, AvatarLossWeights, GradientPyramidLoss, RegularizerGrads};
use super::render::{contribution_signature, render_backward, render_detailed, RenderSettings, SplatGrads};
use super::splats::SplatSet;
use crate::conditioning::Camera;
use crate::image::Image;
use crate::math::{derive_rng, quat_normalize, Mat3, Vec3};
use crate::morphable_model::Mesh;

/// A self-contained differentiable scene: loss is the photometric loss at
/// λ_LPIPS = 0 plus the splat regularizers.
#[derive(Debug, Clone)]
pub struct GradientScene {
    pub splats: SplatSet,
    pub reference: SplatSet,
    pub mesh: Mesh,
    pub camera: Camera,
    pub target: Image,
    pub settings: RenderSettings,
    pub weights: AvatarLossWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSubset {
    Color,
    Opacity,
    Position,
    Scale,
    Rotation,
    Vertices,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose ±h perturbation changed which splats contribute where.
    pub skipped: usize,
}

/// Relative errors use this floor in the denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

impl GradientScene {
    /// A few random splats on two triangles in front of a `size`² camera, with a
    /// random target image.
    pub fn random(seed: u64, n_splats: usize, size: usize) -> Self {
        let mut rng = derive_rng(seed, &[0x6C]);
        let mesh = Mesh::new(
            vec![
                Vec3::new(-0.25, -0.2, 0.05),
                Vec3::new(0.2, -0.15, 0.0),
                Vec3::new(-0.05, 0.25, -0.05),
                Vec3::new(0.05, 0.1, 0.1),
                Vec3::new(0.3, 0.2, 0.0),
                Vec3::new(0.1, -0.25, -0.1),
            ],
            Arc::new(vec![[0, 1, 2], [3, 4, 5]]),
        );
        let mut splats = SplatSet::empty(1);
        for i in 0..n_splats {
            splats.push(
                (i % 2) as u32,
                [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
                [rng.random_range(-1.6..-0.9), rng.random_range(-1.6..-0.9), rng.random_range(-1.6..-0.9)],
                quat_normalize(&[1.0, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]),
                [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
                rng.random_range(0.0..2.0),
            );
        }
        for (k, v) in splats.sh.iter_mut().enumerate() {
            if k % 12 >= 3 {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        let mut reference = splats.clone();
        for p in reference.position.iter_mut().flatten() {
            *p += rng.random_range(-0.1..0.1);
        }
        let f = size as f64 * 1.6;
        let camera = Camera::new(f, f, size as f64 / 2.0, size as f64 / 2.0, Mat3::identity(), Vec3::new(0.0, 0.0, 1.0), size, size).unwrap();
        let mut target = Image::new(size, size, 3);
        for v in target.data.iter_mut() {
            *v = rng.random();
        }
        Self { splats, reference, mesh, camera, target, settings: RenderSettings::with_background([0.2, 0.3, 0.4]), weights: AvatarLossWeights::default() }
    }

    pub fn loss(&self) -> f64 {
        self.loss_of(&self.splats, &self.mesh)
    }

    fn loss_of(&self, splats: &SplatSet, mesh: &Mesh) -> f64 {
        let img = render_detailed(splats, mesh, &self.camera, &self.settings).expect("scene renders").image;
        let (photo, _) = photometric_loss_grad(&img, &self.target, 0.0, &GradientPyramidLoss::default()).expect("shapes match");
        let r = regularizer_losses(splats, &self.reference, &[], &[], 0, &[], &self.weights);
        photo.value + self.weights.lambda_deform * r.deform + self.weights.lambda_rot * r.rot + r.scaling + r.position
    }

    /// Loss with analytic gradients for splat parameters and mesh vertices.
    pub fn loss_and_grad(&self) -> (f64, SplatGrads, Vec<Vec3>) {
        let img = render_detailed(&self.splats, &self.mesh, &self.camera, &self.settings).expect("scene renders").image;
        let (photo, d_img) = photometric_loss_grad(&img, &self.target, 0.0, &GradientPyramidLoss::default()).expect("shapes match");
        let (mut g, vg) = render_backward(&self.splats, &self.mesh, &self.camera, &self.settings, &d_img).expect("scene renders");
        let r = regularizer_grads(&self.splats, &self.reference, &[], &[], 0, &[], &self.weights, RegularizerGrads { splats: &mut g, d_uv: &mut [], field: &mut [] });
        let w = &self.weights;
        (photo.value + w.lambda_deform * r.deform + w.lambda_rot * r.rot + r.scaling + r.position, g, vg)
    }

    fn signature(&self, splats: &SplatSet, mesh: &Mesh) -> u64 {
        let sig = contribution_signature(splats, mesh, &self.camera, &self.settings).expect("scene renders");
        let img = render_detailed(splats, mesh, &self.camera, &self.settings).expect("scene renders").image;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        sig.hash(&mut h);
        // sign pattern of the L1 residual
        for (a, b) in img.data.iter().zip(&self.target.data) {
            (a > b).hash(&mut h);
        }
        h.finish()
    }
}

/// Compares analytic gradients to central differences with step `h` for every
/// parameter in `subset`. A parameter is skipped when perturbing it by ±h changes
/// the set of (pixel, splat) contributions, the α-cap or color-clamp pattern, or
/// the sign of any L1 residual, since the loss is not differentiable there.
pub fn gradient_check(scene: &GradientScene, subset: ParamSubset, h: f64) -> GradientCheckReport {
    let (_, g, vg) = scene.loss_and_grad();
    let base_sig = scene.signature(&scene.splats, &scene.mesh);
    let mut report = GradientCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    let mut check = |analytic: f64, perturb: &dyn Fn(f64) -> (SplatSet, Mesh)| {
        let (sp, mp) = perturb(h);
        let (sm, mm) = perturb(-h);
        if scene.signature(&sp, &mp) != base_sig || scene.signature(&sm, &mm) != base_sig {
            report.skipped += 1;
            return;
        }
        let fd = (scene.loss_of(&sp, &mp) - scene.loss_of(&sm, &mm)) / (2.0 * h);
        let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_ERROR_FLOOR);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    };
    let s = &scene.splats;
    let m = &scene.mesh;
    let n = s.len();
    match subset {
        ParamSubset::Color => {
            for k in 0..s.sh.len() {
                check(g.sh[k], &|d| {
                    let mut t = s.clone();
                    t.sh[k] += d;
                    (t, m.clone())
                });
            }
        }
        ParamSubset::Opacity => {
            for i in 0..n {
                check(g.opacity[i], &|d| {
                    let mut t = s.clone();
                    t.opacity[i] += d;
                    (t, m.clone())
                });
            }
        }
        ParamSubset::Position | ParamSubset::Scale => {
            for i in 0..n {
                for a in 0..3 {
                    let (an, pos) = if subset == ParamSubset::Position { (g.position[i][a], true) } else { (g.log_scale[i][a], false) };
                    check(an, &|d| {
                        let mut t = s.clone();
                        if pos {
                            t.position[i][a] += d;
                        } else {
                            t.log_scale[i][a] += d;
                        }
                        (t, m.clone())
                    });
                }
            }
        }
        ParamSubset::Rotation => {
            for i in 0..n {
                for a in 0..4 {
                    check(g.rotation[i][a], &|d| {
                        let mut t = s.clone();
                        t.rotation[i][a] += d;
                        (t, m.clone())
                    });
                }
            }
        }
        ParamSubset::Vertices => {
            for v in 0..m.vertices.len() {
                for a in 0..3 {
                    check(vg[v][a], &|d| {
                        let mut t = m.clone();
                        t.vertices[v][a] += d;
                        (s.clone(), t)
                    });
                }
            }
        }
    }
    report
}
