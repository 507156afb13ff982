//! `generate`: sample views and expressions, build conditioning, run the
//! stochastic I/O sampler and write images with a manifest.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::blob::TensorBlob;
use super::config::RunConfig;
use super::files::{read_model_file, write_model, ViewLimits};
use super::{check_params, read_json, read_png, write_json, write_png, PipelineError};
use crate::conditioning::{assemble_conditioning_set, Camera, ConditioningSet, TexturedMeshRenderer};
use crate::image::Image;
use crate::morphable_model::{synth_model, ExpressionParams, IdentityParams, MorphableModel, SynthParams};
use crate::scheduler::{default_schedule, sample_stochastic_io, OracleMeshDenoiser, SamplerConfig, SamplerTrace};
use crate::view_sampler::{blendshape_weights, build_expression_database, random_expressions, sample_views, ExpressionDatabase, OrbitRig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.mavc";
pub const EXPRESSIONS_FILE: &str = "expressions.json";
pub const TRACE_FILE: &str = "trace.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Reference,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    /// PNG path relative to the manifest.
    pub file: String,
    /// MAVT conditioning tensor (`[H, W, 50]` f32) relative to the manifest.
    pub conditioning: String,
    pub provenance: Provenance,
    pub camera: Camera,
    pub azimuth: Option<f64>,
    pub elevation: Option<f64>,
    pub phi: Vec<f64>,
    pub beta: Vec<f64>,
    /// Entry of the expression database the view was generated with.
    pub database_index: Option<usize>,
    /// Where a reference image came from; `None` when rendered from the model.
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub model_file: String,
    pub synth: Option<SynthParams>,
    pub beta: Vec<f64>,
    pub sampler: SamplerConfig,
    pub snr_shift: f64,
    pub resolution: usize,
    pub view: ViewLimits,
    pub expressions_file: String,
    pub images: Vec<ManifestImage>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, PipelineError> {
        let m: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(PipelineError::Manifest(format!("unsupported manifest version {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.images.iter().filter(|i| i.provenance == p).count()
    }
}

pub struct GenerateOutput {
    pub model: Arc<MorphableModel>,
    pub synth: Option<SynthParams>,
    pub beta: IdentityParams,
    pub reference_images: Vec<Image>,
    pub reference_conditioning: Vec<ConditioningSet>,
    pub conditioning: Vec<ConditioningSet>,
    /// Clean latents, i.e. the generated images before quantization.
    pub latents: Vec<Image>,
    pub database: ExpressionDatabase,
    pub database_indices: Vec<usize>,
    pub angles: Vec<(f64, f64)>,
    pub trace: SamplerTrace,
    pub sampler: SamplerConfig,
    pub view: ViewLimits,
}

pub fn load_model(cfg: &RunConfig) -> Result<(Arc<MorphableModel>, Option<SynthParams>), PipelineError> {
    Ok(match (&cfg.model.path, cfg.model.synth) {
        (Some(p), _) => (Arc::new(read_model_file(p)?), None),
        (None, Some(s)) => (Arc::new(synth_model(s.seed, s.n_subdiv, s.k_id, s.k_expr)), Some(s)),
        (None, None) => return Err(PipelineError::Config("no model given".into())),
    })
}

pub fn cmd_synth_model(params: SynthParams, path: &Path) -> Result<MorphableModel, PipelineError> {
    let model = synth_model(params.seed, params.n_subdiv, params.k_id, params.k_expr);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::at(dir, e))?;
    }
    write_model(path, &model, Some(params))?;
    Ok(model)
}

/// Runs generation in memory.
pub fn generate(cfg: &RunConfig) -> Result<GenerateOutput, PipelineError> {
    cfg.validate()?;
    let g = &cfg.generate;
    let (model, synth) = load_model(cfg)?;
    if model.uv_coords.is_none() {
        return Err(PipelineError::Config("the oracle renderer needs a model with a UV atlas".into()));
    }
    let beta = IdentityParams(cfg.identity.clone().unwrap_or_else(|| vec![0.0; model.k_id]));
    check_params("identity", &beta.0, model.k_id)?;
    let res = g.resolution;
    let rig = OrbitRig::head(res);
    let renderer = TexturedMeshRenderer::new(model.clone(), g.supersample)?;

    let mut ref_cameras = Vec::new();
    let mut ref_phis = Vec::new();
    let mut reference_images = Vec::new();
    for (i, r) in cfg.references.iter().enumerate() {
        let camera = match &r.camera {
            Some(c) => c.resized(res, res),
            None => rig.camera(r.azimuth, r.elevation)?,
        };
        let phi = ExpressionParams(r.phi.clone().unwrap_or_else(|| vec![0.0; model.k_expr]));
        check_params("reference phi", &phi.0, model.k_expr)?;
        let image = match &r.image {
            Some(p) => {
                let img = read_png(p)?;
                if img.shape() != (res, res, 3) {
                    return Err(PipelineError::Config(format!("reference {i}: image is {:?}, expected ({res}, {res}, 3)", img.shape())));
                }
                img
            }
            None => renderer.render(&beta, &phi, &camera)?,
        };
        ref_cameras.push(camera);
        ref_phis.push(phi);
        reference_images.push(image);
    }
    let first = ref_cameras[0].clone();
    let reference_conditioning = ref_cameras
        .iter()
        .zip(&ref_phis)
        .map(|(c, p)| assemble_conditioning_set(&model, &beta, p, c, &first, true, res))
        .collect::<Result<Vec<_>, _>>()?;

    let views = sample_views(g.count, g.psi_max, g.theta_max, &rig, cfg.seed)?;
    let samples = random_expressions(model.k_expr, g.expression_samples, g.expression_limit, cfg.seed);
    let database = build_expression_database(&samples, g.database_size, &blendshape_weights(&model), cfg.seed)?;
    let database_indices: Vec<usize> = (0..g.count).map(|i| i % database.representatives.len()).collect();
    let conditioning = views
        .iter()
        .zip(&database_indices)
        .map(|(v, &d)| assemble_conditioning_set(&model, &beta, &database.representatives[d], &v.camera, &first, false, res))
        .collect::<Result<Vec<_>, _>>()?;

    let schedule = default_schedule(g.snr_shift)?;
    let sampler = SamplerConfig { steps: g.steps, batch_gen: g.batch_gen, batch_ref: g.batch_ref, cfg_weight: g.cfg_weight, seed: cfg.seed };
    let denoiser = OracleMeshDenoiser::new(renderer);
    let out = sample_stochastic_io(&denoiser, &reference_images, &reference_conditioning, &conditioning, (res, res, 3), &schedule, &sampler)?;
    Ok(GenerateOutput {
        model,
        synth,
        beta,
        reference_images,
        reference_conditioning,
        conditioning,
        latents: out.latents,
        database,
        database_indices,
        angles: views.iter().map(|v| (v.azimuth, v.elevation)).collect(),
        trace: out.trace,
        sampler,
        view: ViewLimits::new(g.psi_max, g.theta_max, rig),
    })
}

/// Generates and writes everything under `out_dir`.
pub fn cmd_generate(cfg: &RunConfig, out_dir: &Path) -> Result<(Manifest, GenerateOutput), PipelineError> {
    let out = generate(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::at(out_dir, e))?;
    write_model(&out_dir.join(MODEL_FILE), &out.model, out.synth)?;
    let mut images = Vec::new();
    let write_cond = |name: &str, c: &ConditioningSet| -> Result<(), PipelineError> {
        let path = out_dir.join(name);
        std::fs::write(&path, TensorBlob::from_image_f32(&c.to_tensor()).to_bytes()).map_err(|e| PipelineError::at(&path, e))
    };
    for (i, (img, cond)) in out.reference_images.iter().zip(&out.reference_conditioning).enumerate() {
        let (file, cname) = (format!("ref_{i:04}.png"), format!("ref_{i:04}.cond.mavt"));
        write_png(&out_dir.join(&file), img)?;
        write_cond(&cname, cond)?;
        let r = &cfg.references[i];
        images.push(ManifestImage {
            file,
            conditioning: cname,
            provenance: Provenance::Reference,
            camera: cond.source.camera.clone(),
            azimuth: r.camera.is_none().then_some(r.azimuth),
            elevation: r.camera.is_none().then_some(r.elevation),
            phi: cond.source.phi.0.clone(),
            beta: out.beta.0.clone(),
            database_index: None,
            source: r.image.as_ref().map(|p| p.display().to_string()),
        });
    }
    for (i, (z, cond)) in out.latents.iter().zip(&out.conditioning).enumerate() {
        let (file, cname) = (format!("gen_{i:04}.png"), format!("gen_{i:04}.cond.mavt"));
        write_png(&out_dir.join(&file), z)?;
        write_cond(&cname, cond)?;
        images.push(ManifestImage {
            file,
            conditioning: cname,
            provenance: Provenance::Generated,
            camera: cond.source.camera.clone(),
            azimuth: Some(out.angles[i].0),
            elevation: Some(out.angles[i].1),
            phi: cond.source.phi.0.clone(),
            beta: out.beta.0.clone(),
            database_index: Some(out.database_indices[i]),
            source: None,
        });
    }
    write_json(&out_dir.join(EXPRESSIONS_FILE), &out.database)?;
    write_json(&out_dir.join(TRACE_FILE), &out.trace)?;
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        seed: cfg.seed,
        model_file: MODEL_FILE.into(),
        synth: out.synth,
        beta: out.beta.0.clone(),
        sampler: out.sampler.clone(),
        snr_shift: cfg.generate.snr_shift,
        resolution: cfg.generate.resolution,
        view: out.view.clone(),
        expressions_file: EXPRESSIONS_FILE.into(),
        images,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    log::info!("generated {} views into {}", out.latents.len(), out_dir.display());
    Ok((manifest, out))
}
