//! TOML run configuration shared by `generate` and `fit`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::avatar::fit::FitConfig;
use crate::conditioning::{Camera, DEFAULT_LATENT_RESOLUTION};
use crate::morphable_model::SynthParams;
use crate::scheduler::DEFAULT_TRAIN_STEPS;
use crate::view_sampler::{DEFAULT_DATABASE_SIZE, DEFAULT_PSI_MAX, DEFAULT_THETA_MAX};

/// Either a model file or a procedural model. Defaults to the procedural one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub path: Option<PathBuf>,
    pub synth: Option<SynthParams>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { path: None, synth: Some(SynthParams::default()) }
    }
}

/// An input view. The camera is either explicit or placed on the generation
/// orbit at (azimuth, elevation) degrees. Without an image the reference is
/// rendered from the model (synthetic runs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceView {
    #[serde(default)]
    pub azimuth: f64,
    #[serde(default)]
    pub elevation: f64,
    pub camera: Option<Camera>,
    /// Expression coefficients; zeros when absent.
    pub phi: Option<Vec<f64>>,
    pub image: Option<PathBuf>,
}

impl Default for ReferenceView {
    fn default() -> Self {
        Self { azimuth: 0.0, elevation: 0.0, camera: None, phi: None, image: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Number of generated views (G).
    pub count: usize,
    /// Generated latents per denoiser call (G′).
    pub batch_gen: usize,
    /// References per denoiser call (R′).
    pub batch_ref: usize,
    /// DDIM steps (T).
    pub steps: usize,
    pub cfg_weight: f64,
    /// Number of jointly denoised images the SNR shift accounts for.
    pub snr_shift: f64,
    /// Latent and image resolution (the latent encoder is the identity).
    pub resolution: usize,
    pub psi_max: f64,
    pub theta_max: f64,
    pub database_size: usize,
    /// Random expressions the database is selected from.
    pub expression_samples: usize,
    /// Expression coefficients are drawn from [-limit, limit].
    pub expression_limit: f64,
    /// Sub-samples per pixel axis for oracle renders.
    pub supersample: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 840,
            batch_gen: 4,
            batch_ref: 1,
            steps: 250,
            cfg_weight: 2.0,
            snr_shift: 8.0,
            resolution: DEFAULT_LATENT_RESOLUTION,
            psi_max: DEFAULT_PSI_MAX,
            theta_max: DEFAULT_THETA_MAX,
            database_size: DEFAULT_DATABASE_SIZE,
            expression_samples: 2000,
            expression_limit: 1.5,
            supersample: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSpec,
    /// Identity coefficients; zeros when absent.
    pub identity: Option<Vec<f64>>,
    #[serde(default = "default_references")]
    pub references: Vec<ReferenceView>,
    #[serde(default)]
    pub generate: GenerateConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_references() -> Vec<ReferenceView> {
    vec![ReferenceView::default()]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSpec::default(),
            identity: None,
            references: default_references(),
            generate: GenerateConfig::default(),
            fit: FitConfig::default(),
            out: default_out(),
        }
    }
}

fn bad(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

impl RunConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::at(path, e))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.model.path {
            fix(p);
        }
        for r in &mut self.references {
            if let Some(p) = &mut r.image {
                fix(p);
            }
        }
        fix(&mut self.out);
    }

    /// Checks bounds that do not depend on the model, and that referenced files exist.
    pub fn validate(&self) -> Result<(), PipelineError> {
        match (&self.model.path, &self.model.synth) {
            (Some(_), Some(_)) => return Err(bad("model: give either `path` or `synth`, not both")),
            (None, None) => return Err(bad("model: one of `path` or `synth` is required")),
            (Some(p), None) if !p.is_file() => return Err(bad(format!("model file {} does not exist", p.display()))),
            (None, Some(s)) if s.n_subdiv > 6 || s.k_expr == 0 => return Err(bad("model.synth: need n_subdiv ≤ 6 and k_expr ≥ 1")),
            _ => {}
        }
        if self.references.is_empty() {
            return Err(bad("at least one reference view is required"));
        }
        for (i, r) in self.references.iter().enumerate() {
            if let Some(p) = &r.image {
                if !p.is_file() {
                    return Err(bad(format!("reference {i}: image {} does not exist", p.display())));
                }
            }
            if let Some(c) = &r.camera {
                c.validate().map_err(|e| bad(format!("reference {i}: {e}")))?;
            }
            if !(r.azimuth.is_finite() && r.elevation.is_finite()) {
                return Err(bad(format!("reference {i}: non-finite angles")));
            }
        }
        let g = &self.generate;
        if g.count == 0 {
            return Err(bad("generate.count must be at least 1"));
        }
        if g.batch_gen == 0 || g.batch_gen > g.count {
            return Err(bad(format!("generate.batch_gen must be in 1..={}", g.count)));
        }
        if g.batch_ref > self.references.len() {
            return Err(bad(format!("generate.batch_ref {} exceeds the {} reference views", g.batch_ref, self.references.len())));
        }
        if g.steps == 0 || g.steps > DEFAULT_TRAIN_STEPS {
            return Err(bad(format!("generate.steps must be in 1..={DEFAULT_TRAIN_STEPS}")));
        }
        if !g.cfg_weight.is_finite() || !(g.snr_shift >= 1.0 && g.snr_shift.is_finite()) {
            return Err(bad("generate.cfg_weight must be finite and generate.snr_shift ≥ 1"));
        }
        if !(8..=1024).contains(&g.resolution) {
            return Err(bad("generate.resolution must be in 8..=1024"));
        }
        if !(g.psi_max > 0.0 && g.psi_max <= 90.0 && g.theta_max > 0.0 && g.theta_max <= 90.0) {
            return Err(bad("generate.psi_max and generate.theta_max must be in (0, 90]"));
        }
        if g.database_size == 0 || g.expression_samples < g.database_size {
            return Err(bad("generate.database_size must be in 1..=expression_samples"));
        }
        if !(g.expression_limit >= 0.0 && g.expression_limit.is_finite()) || g.supersample == 0 || g.supersample > 8 {
            return Err(bad("generate.expression_limit must be ≥ 0 and generate.supersample in 1..=8"));
        }
        self.fit.weights.validate().map_err(|e| bad(format!("fit.weights: {e}")))?;
        if self.fit.splat_count == 0 || self.fit.uv_resolution < 4 {
            return Err(bad("fit.splat_count must be ≥ 1 and fit.uv_resolution ≥ 4"));
        }
        Ok(())
    }
}
