//! Denoisers with known optimal behavior, used to verify the sampler and to drive
//! the pipeline end to end without a trained network.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use super::sampler::{Conditioning, DenoiseRequest, Denoiser};
use super::SchedulerError;
use crate::conditioning::{ConditioningSet, TexturedMeshRenderer, ViewSource, PAD_VALUE};
use crate::image::Image;

/// Bayes-optimal noise predictor for data distributed as N(m, σ²·I).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticGaussianDenoiser {
    pub mean: f64,
    pub variance: f64,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mean: f64, variance: f64) -> Self {
        assert!(variance >= 0.0, "variance must be non-negative");
        Self { mean, variance }
    }

    /// E[x | z_t].
    pub fn posterior_mean(&self, z: f64, alpha_bar: f64) -> f64 {
        let d = alpha_bar * self.variance + 1.0 - alpha_bar;
        if d == 0.0 {
            // ᾱ = 1 with a point mass: no noise, so the latent is the data.
            return z;
        }
        (self.variance * alpha_bar.sqrt() * z + (1.0 - alpha_bar) * self.mean) / d
    }

    /// ε̂ = (z − √ᾱ·E[x|z]) / √(1−ᾱ), simplified to avoid the 0/0 at ᾱ = 1.
    pub fn predict_noise(&self, z: f64, alpha_bar: f64) -> f64 {
        let d = alpha_bar * self.variance + 1.0 - alpha_bar;
        if d == 0.0 {
            return 0.0;
        }
        (1.0 - alpha_bar).sqrt() * (z - alpha_bar.sqrt() * self.mean) / d
    }
}

impl<C: Conditioning> Denoiser<C> for AnalyticGaussianDenoiser {
    fn predict(&self, req: &DenoiseRequest<'_, C>) -> Result<Vec<Image>, SchedulerError> {
        Ok(req
            .noisy
            .iter()
            .map(|z| Image { data: z.data.iter().map(|&v| self.predict_noise(v, req.alpha_bar)).collect(), ..(*z).clone() })
            .collect())
    }
}

/// Predicts the noise that would take each latent exactly to a rendering of the
/// mesh its conditioning describes. At ᾱ = 1 it returns `z − x₀` unscaled.
pub struct OracleMeshDenoiser {
    renderer: TexturedMeshRenderer,
    cache: Mutex<HashMap<u64, Arc<Image>>>,
}

fn source_key(src: &ViewSource, mask: &[bool], res: (usize, usize)) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for v in src.beta.0.iter().chain(&src.phi.0) {
        v.to_bits().hash(&mut h);
    }
    let c = &src.camera;
    for v in [c.fx, c.fy, c.cx, c.cy].iter().chain(c.rotation.iter()).chain(c.translation.iter()) {
        v.to_bits().hash(&mut h);
    }
    (c.width, c.height, res).hash(&mut h);
    mask.hash(&mut h);
    h.finish()
}

impl OracleMeshDenoiser {
    pub fn new(renderer: TexturedMeshRenderer) -> Self {
        Self { renderer, cache: Mutex::new(HashMap::new()) }
    }

    pub fn renderer(&self) -> &TexturedMeshRenderer {
        &self.renderer
    }

    /// The image the denoiser steers towards for a conditioning set: the textured
    /// render at the set's resolution with outcropped pixels padded.
    pub fn target(&self, cond: &ConditioningSet) -> Result<Arc<Image>, SchedulerError> {
        let res = (cond.height(), cond.width());
        let key = source_key(&cond.source, &cond.mask_outcrop, res);
        if let Some(img) = self.cache.lock().unwrap().get(&key) {
            return Ok(img.clone());
        }
        let src = &cond.source;
        let camera = src.camera.resized(res.1, res.0);
        let mut img = self
            .renderer
            .render(&src.beta, &src.phi, &camera)
            .map_err(|e| SchedulerError::Denoiser(e.to_string()))?;
        for (p, &m) in cond.mask_outcrop.iter().enumerate() {
            if m {
                img.data[p * 3..p * 3 + 3].fill(PAD_VALUE);
            }
        }
        let img = Arc::new(img);
        self.cache.lock().unwrap().insert(key, img.clone());
        Ok(img)
    }
}

impl Denoiser<ConditioningSet> for OracleMeshDenoiser {
    fn predict(&self, req: &DenoiseRequest<'_, ConditioningSet>) -> Result<Vec<Image>, SchedulerError> {
        let a = req.alpha_bar;
        req.noisy
            .par_iter()
            .zip(req.gen_cond.par_iter())
            .map(|(z, cond)| {
                let x0 = self.target(cond)?;
                if x0.shape() != z.shape() {
                    return Err(SchedulerError::ShapeMismatch(z.shape(), x0.shape()));
                }
                let scale = if a < 1.0 { 1.0 / (1.0 - a).sqrt() } else { 1.0 };
                let data = z.data.iter().zip(&x0.data).map(|(zv, xv)| (zv - a.sqrt() * xv) * scale).collect();
                Ok(Image { data, ..(*z).clone() })
            })
            .collect()
    }
}
