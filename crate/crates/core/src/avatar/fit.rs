//! Gradient-based fitting of splats and deformation field to posed images.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::field::{DeformationField, DeformationInputs, MlpField, DEFAULT_FIELD_HIDDEN};
use super::loss::{photometric_loss_grad, regularizer_grads, total_loss, AvatarLossWeights, GradientPyramidLoss, LossComponents, PerceptualLoss, RegularizerGrads};
use super::model::Avatar;
use super::render::{render_backward, render_detailed, RenderSettings, SplatGrads};
use super::splats::{init_splats_with, InitOptions, SplatSet, DEFAULT_INIT_SCALE, DEFAULT_SH_DEGREE};
use super::AvatarError;
use crate::conditioning::Camera;
use crate::image::Image;
use crate::math::{derive_rng, quat_normalize, quat_to_mat, sigmoid, Vec3};
use crate::morphable_model::{ExpressionParams, IdentityParams, Mesh, MorphableModel};

#[derive(Debug, Clone)]
pub struct TrainingView {
    pub image: Image,
    pub camera: Camera,
    pub phi: ExpressionParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Local units per step.
    pub position: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub opacity: f64,
    pub field_start: f64,
    pub field_end: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 0.005,
            log_scale: 0.01,
            rotation: 0.005,
            sh_dc: 0.02,
            sh_rest: 0.001,
            opacity: 0.05,
            field_start: 1e-5,
            field_end: 1e-7,
        }
    }
}

impl LearningRates {
    /// Log-linear decay from `field_start` at iteration 0 to `field_end` at the last.
    pub fn field(&self, iteration: usize, iterations: usize) -> f64 {
        if iterations <= 1 {
            return self.field_start;
        }
        let t = iteration.min(iterations - 1) as f64 / (iterations - 1) as f64;
        if t == 0.0 {
            return self.field_start;
        }
        if t == 1.0 {
            return self.field_end;
        }
        (self.field_start.ln() * (1.0 - t) + self.field_end.ln() * t).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub start: usize,
    /// No densification at or after this iteration.
    pub stop: usize,
    pub interval: usize,
    /// Mean |∂L/∂(screen position)| above which a splat is split.
    pub grad_threshold: f64,
    /// Splats with opacity below this are pruned.
    pub min_opacity: f64,
    pub max_splats: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self { enabled: false, start: 200, stop: 1200, interval: 200, grad_threshold: 2e-4, min_opacity: 0.005, max_splats: 20_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iterations: usize,
    pub splat_count: usize,
    pub uv_resolution: usize,
    pub sh_degree: usize,
    pub init_scale: f64,
    pub field_hidden: usize,
    pub learning_rates: LearningRates,
    pub weights: AvatarLossWeights,
    pub densify: DensifyConfig,
    pub render: RenderSettings,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            splat_count: 5000,
            uv_resolution: 64,
            sh_degree: DEFAULT_SH_DEGREE,
            init_scale: DEFAULT_INIT_SCALE,
            field_hidden: DEFAULT_FIELD_HIDDEN,
            learning_rates: LearningRates::default(),
            weights: AvatarLossWeights::default(),
            densify: DensifyConfig::default(),
            render: RenderSettings::default(),
            seed: 0,
        }
    }
}

pub struct FitResult {
    pub avatar: Avatar,
    /// One entry per iteration.
    pub log: Vec<LossComponents>,
}

/// Area-proportional splats on the neutral UV mesh and a fresh field.
pub fn initial_avatar(model: Arc<MorphableModel>, beta: IdentityParams, config: &FitConfig) -> Result<Avatar, AvatarError> {
    let field = MlpField::new(config.field_hidden, config.seed);
    let empty = Avatar::new(model, beta, config.uv_resolution, SplatSet::empty(config.sh_degree), field, config.render)?;
    let opts = InitOptions { sh_degree: config.sh_degree, scale_constant: config.init_scale };
    let splats = init_splats_with(&empty.neutral_mesh(), config.splat_count, config.seed, &opts)?;
    Ok(Avatar { splats, ..empty })
}

pub fn fit_avatar(model: Arc<MorphableModel>, beta: IdentityParams, views: &[TrainingView], config: &FitConfig) -> Result<FitResult, AvatarError> {
    let avatar = initial_avatar(model, beta, config)?;
    fit_from(avatar, views, config, &GradientPyramidLoss::default())
}

struct PreparedView<'a> {
    view: &'a TrainingView,
    base: Vec<Vec3>,
    inputs: DeformationInputs,
}

struct Optimizers {
    position: Adam,
    log_scale: Adam,
    rotation: Adam,
    sh: Adam,
    opacity: Adam,
    field: Adam,
}

impl Optimizers {
    fn new(s: &SplatSet, field_len: usize) -> Self {
        let n = s.len();
        Self {
            position: Adam::new(3 * n),
            log_scale: Adam::new(3 * n),
            rotation: Adam::new(4 * n),
            sh: Adam::new(s.sh.len()),
            opacity: Adam::new(n),
            field: Adam::new(field_len),
        }
    }

    fn remap(&mut self, sh_width: usize, sources: &[Option<usize>]) {
        self.position.remap_rows(3, sources);
        self.log_scale.remap_rows(3, sources);
        self.rotation.remap_rows(4, sources);
        self.sh.remap_rows(sh_width, sources);
        self.opacity.remap_rows(1, sources);
    }
}

/// Optimizes `avatar` against `views`. The splats passed in are also the
/// reference for the deformation and rotation regularizers.
pub fn fit_from(mut avatar: Avatar, views: &[TrainingView], config: &FitConfig, perceptual: &dyn PerceptualLoss) -> Result<FitResult, AvatarError> {
    if views.is_empty() {
        return Err(AvatarError::Invalid("fitting needs at least one training view".into()));
    }
    config.weights.validate()?;
    let prepared = views
        .iter()
        .map(|v| {
            if v.image.shape() != (v.camera.height, v.camera.width, 3) {
                return Err(AvatarError::Invalid(format!("training image {:?} does not match its camera", v.image.shape())));
            }
            let posed = avatar.posed(&v.phi)?;
            Ok(PreparedView { view: v, base: posed.base, inputs: posed.inputs })
        })
        .collect::<Result<Vec<_>, AvatarError>>()?;
    let deformable = avatar.deformable();
    let res = avatar.uv.resolution;
    let tris = avatar.uv.triangles.clone();
    let mut reference = avatar.splats.clone();
    let mut opt = Optimizers::new(&avatar.splats, avatar.field.params.len());
    let iterations = config.iterations;
    let lr = &config.learning_rates;
    let mut log = Vec::with_capacity(iterations);
    let mut order: Vec<usize> = Vec::new();
    let mut grad_accum = vec![0.0; avatar.splats.len()];
    let mut grad_count = vec![0u32; avatar.splats.len()];

    for it in 0..iterations {
        if it % views.len() == 0 {
            order = (0..views.len()).collect();
            order.shuffle(&mut derive_rng(config.seed, &[0xF17, (it / views.len()) as u64]));
        }
        let pv = &prepared[order[it % views.len()]];
        let splats = &avatar.splats;
        let d_uv = avatar.field.forward(&pv.inputs);
        let mesh = Mesh::new(super::field::apply_deformation(&pv.base, &d_uv, &deformable)?, tris.clone());
        let rendered = render_detailed(splats, &mesh, &pv.view.camera, &config.render)?.image;
        let lambda = config.weights.lambda_lpips(it, iterations);
        let (photo, d_img) = photometric_loss_grad(&rendered, &pv.view.image, lambda, perceptual)?;
        let (mut sg, vgrad) = render_backward(splats, &mesh, &pv.view.camera, &config.render, &d_img)?;
        let mut d_def: Vec<Vec3> = vgrad.iter().zip(&deformable).map(|(g, m)| if *m { *g } else { Vec3::zeros() }).collect();
        let mut fgrad = vec![0.0; avatar.field.params.len()];
        let regs = regularizer_grads(
            splats,
            &reference,
            &d_uv,
            &pv.inputs.valid,
            res,
            &avatar.field.params,
            &config.weights,
            RegularizerGrads { splats: &mut sg, d_uv: &mut d_def, field: &mut fgrad },
        );
        for (a, b) in fgrad.iter_mut().zip(avatar.field.backward(&pv.inputs, &d_def)) {
            *a += b;
        }
        let mut c = LossComponents {
            l1: photo.l1,
            ssim: photo.ssim,
            perceptual: photo.perceptual.unwrap_or(0.0),
            lambda_lpips: lambda,
            rgb: photo.value,
            lap: regs.lap,
            deform: regs.deform,
            rot: regs.rot,
            scaling: regs.scaling,
            position: regs.position,
            weight_decay: regs.weight_decay,
            total: 0.0,
        };
        c.total = total_loss(&c, &config.weights);
        if !c.total.is_finite() {
            return Err(AvatarError::Diverged { iteration: it, state: state_summary(&avatar, &c) });
        }
        log.push(c);

        for (i, g) in sg.screen_grad.iter().enumerate() {
            if *g > 0.0 {
                grad_accum[i] += g;
                grad_count[i] += 1;
            }
        }
        step(&mut avatar, &mut opt, &sg, &fgrad, lr, it, iterations);

        let d = &config.densify;
        if d.enabled && it + 1 >= d.start && it + 1 < d.stop && d.interval > 0 && (it + 1) % d.interval == 0 {
            let sources = densify(&mut avatar.splats, &mut reference, &grad_accum, &grad_count, d, derive_rng(config.seed, &[0xD3, it as u64]));
            opt.remap(avatar.splats.coeffs() * 3, &sources);
            grad_accum = vec![0.0; avatar.splats.len()];
            grad_count = vec![0; avatar.splats.len()];
        }
        if (it + 1) % 100 == 0 {
            log::info!("iteration {}: loss {:.5} (l1 {:.5}, splats {})", it + 1, c.total, c.l1, avatar.splats.len());
        }
    }
    Ok(FitResult { avatar, log })
}

fn step(avatar: &mut Avatar, opt: &mut Optimizers, g: &SplatGrads, fgrad: &[f64], lr: &LearningRates, it: usize, iterations: usize) {
    let s = &mut avatar.splats;
    opt.position.step(s.position.as_flattened_mut(), g.position.as_flattened(), lr.position);
    opt.log_scale.step(s.log_scale.as_flattened_mut(), g.log_scale.as_flattened(), lr.log_scale);
    opt.rotation.step(s.rotation.as_flattened_mut(), g.rotation.as_flattened(), lr.rotation);
    opt.opacity.step(&mut s.opacity, &g.opacity, lr.opacity);
    // DC and higher-order SH coefficients get separate rates.
    let width = s.coeffs() * 3;
    let rates: Vec<f64> = (0..s.sh.len()).map(|i| if i % width < 3 { lr.sh_dc } else { lr.sh_rest }).collect();
    opt.sh.step_with_rates(&mut s.sh, &g.sh, &rates);
    s.normalize_rotations();
    opt.field.step(&mut avatar.field.params, fgrad, lr.field(it, iterations));
}

/// Splits high-gradient splats in two and prunes transparent ones. Returns, for
/// every new splat, the old index whose optimizer state it keeps.
fn densify(s: &mut SplatSet, reference: &mut SplatSet, accum: &[f64], count: &[u32], cfg: &DensifyConfig, mut rng: impl rand::Rng) -> Vec<Option<usize>> {
    let n = s.len();
    let mut out = SplatSet::empty(s.sh_degree);
    let mut out_ref = SplatSet::empty(s.sh_degree);
    let mut sources = Vec::with_capacity(n);
    let mut budget = cfg.max_splats.saturating_sub(n);
    for i in 0..n {
        if sigmoid(s.opacity[i]) < cfg.min_opacity && (out.len() + (n - i)) > 1 {
            continue;
        }
        let mean = if count[i] > 0 { accum[i] / count[i] as f64 } else { 0.0 };
        if mean > cfg.grad_threshold && budget > 0 {
            budget -= 1;
            let rot = quat_to_mat(&quat_normalize(&s.rotation[i]));
            let scale = Vec3::from(s.log_scale[i].map(f64::exp));
            for _ in 0..2 {
                let z = Vec3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                let mu = Vec3::from(s.position[i]) + rot * scale.component_mul(&z);
                out.push_from(s, i);
                let k = out.len() - 1;
                out.position[k] = mu.into();
                out.log_scale[k] = s.log_scale[i].map(|v| v - 1.6f64.ln());
                out_ref.push_from(&out, k);
                sources.push(None);
            }
        } else {
            out.push_from(s, i);
            out_ref.push_from(reference, i);
            sources.push(Some(i));
        }
    }
    *s = out;
    *reference = out_ref;
    sources
}

fn state_summary(avatar: &Avatar, c: &LossComponents) -> String {
    let s = &avatar.splats;
    let bad = |v: &[f64]| v.iter().filter(|x| !x.is_finite()).count();
    format!(
        "components {c:?}; splats {}; non-finite: position {}, scale {}, rotation {}, sh {}, opacity {}, field {}",
        s.len(),
        bad(s.position.as_flattened()),
        bad(s.log_scale.as_flattened()),
        bad(s.rotation.as_flattened()),
        bad(&s.sh),
        bad(&s.opacity),
        bad(&avatar.field.params)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable_model::synth_model;
    use crate::view_sampler::OrbitRig;

    fn small_setup(iterations: usize) -> (Avatar, Vec<TrainingView>, FitConfig) {
        let model = Arc::new(synth_model(1, 1, 3, 3));
        let cfg = FitConfig { iterations, splat_count: 150, uv_resolution: 16, ..Default::default() };
        let av = initial_avatar(model, IdentityParams(vec![0.2, -0.1, 0.4]), &cfg).unwrap();
        let rig = OrbitRig::head(24);
        let views = [(0.0, 0.0), (30.0, 5.0), (-25.0, -10.0)]
            .iter()
            .enumerate()
            .map(|(k, &(a, e))| {
                let phi = ExpressionParams(vec![0.3 * k as f64, -0.2, 0.1]);
                let camera = rig.camera(a, e).unwrap();
                TrainingView { image: av.render(&phi, &camera).unwrap(), camera, phi }
            })
            .collect();
        (av, views, cfg)
    }

    #[test]
    fn field_learning_rate_decays_logarithmically() {
        let lr = LearningRates::default();
        assert_eq!(lr.field(0, 100), 1e-5);
        assert!((lr.field(99, 100) - 1e-7).abs() < 1e-20);
        assert!((lr.field(50, 101) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn zero_iterations_return_the_initialization() {
        let (av, views, cfg) = small_setup(0);
        let out = fit_from(av.clone(), &views, &cfg, &GradientPyramidLoss::default()).unwrap();
        assert_eq!(out.avatar, av);
        assert!(out.log.is_empty());
    }

    #[test]
    fn self_fit_loss_is_non_increasing() {
        let (av, views, cfg) = small_setup(10);
        let out = fit_from(av, &views, &cfg, &GradientPyramidLoss::default()).unwrap();
        assert_eq!(out.log.len(), 10);
        for w in out.log.windows(2) {
            assert!(w[1].total <= w[0].total, "{:?} > {:?}", w[1], w[0]);
        }
        for c in &out.log {
            assert!(c.rgb.abs() < 1e-12);
            assert_eq!(c.total, total_loss(c, &cfg.weights));
        }
    }

    #[test]
    fn fitting_reduces_photometric_error() {
        let (av, views, cfg) = small_setup(60);
        let mut perturbed = av.clone();
        for v in perturbed.splats.sh.iter_mut().step_by(12) {
            *v += 0.4;
        }
        let before = perturbed.render(&views[0].phi, &views[0].camera).unwrap().psnr(&views[0].image).unwrap();
        let out = fit_from(perturbed, &views, &cfg, &GradientPyramidLoss::default()).unwrap();
        let after = out.avatar.render(&views[0].phi, &views[0].camera).unwrap().psnr(&views[0].image).unwrap();
        assert!(after > before + 3.0, "{before} -> {after}");
        assert!(out.avatar.splats.rotation.iter().all(|q| (crate::math::quat_norm(q) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn nan_loss_aborts_with_state() {
        let (mut av, views, cfg) = small_setup(3);
        av.splats.position[0][1] = f64::NAN;
        match fit_from(av, &views, &cfg, &GradientPyramidLoss::default()) {
            Err(AvatarError::Diverged { iteration: 0, state }) => assert!(state.contains("position 1")),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.log.len())),
        }
    }

    #[test]
    fn densify_splits_and_prunes() {
        let (av, _, _) = small_setup(0);
        let mut s = av.splats.clone();
        let mut reference = s.clone();
        s.opacity[0] = -20.0;
        let n = s.len();
        let mut accum = vec![0.0; n];
        accum[3] = 1.0;
        let count = vec![1; n];
        let cfg = DensifyConfig { enabled: true, ..Default::default() };
        let sources = densify(&mut s, &mut reference, &accum, &count, &cfg, derive_rng(0, &[]));
        assert_eq!(s.len(), n);
        assert_eq!(sources.len(), n);
        assert_eq!(sources.iter().filter(|x| x.is_none()).count(), 2);
        // splat 0 pruned, 1 and 2 kept, 3 split into new indices 2 and 3
        assert_eq!(sources[..2], [Some(1), Some(2)]);
        assert_eq!(s.parent[2], av.splats.parent[3]);
        assert!((s.log_scale[2][0] - (av.splats.log_scale[3][0] - 1.6f64.ln())).abs() < 1e-12);
        assert_eq!(reference.len(), n);
    }
}
