//! Stochastic I/O conditioning: every timestep reshuffles the generated latents
//! into batches and pairs each batch with a fresh random subset of references.

use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ddim::{cfg_combine, ddim_update};
use super::{NoiseSchedule, SchedulerError};
use crate::conditioning::ConditioningSet;
use crate::image::Image;
use crate::math::derive_rng;

/// Level used in place of an exactly-zero source ᾱ so the first step from a
/// zero-terminal-SNR schedule stays finite.
pub const ZERO_SNR_FLOOR: f64 = 9.094947017729282e-13; // 2^-40

const STREAM_NOISE: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_REFS: u64 = 3;

/// Per-item conditioning that can be switched off for the unconditional branch.
pub trait Conditioning: Sync {
    fn dropped(&self) -> Self;
}

impl Conditioning for ConditioningSet {
    fn dropped(&self) -> Self {
        ConditioningSet::dropped(self)
    }
}

impl Conditioning for () {
    fn dropped(&self) -> Self {}
}

/// One noise-prediction call.
pub struct DenoiseRequest<'a, C> {
    pub noisy: Vec<&'a Image>,
    pub gen_cond: Vec<&'a C>,
    pub ref_latents: Vec<&'a Image>,
    pub ref_cond: Vec<&'a C>,
    /// Indices of the generated latents in this batch.
    pub gen_indices: &'a [usize],
    pub t: usize,
    pub alpha_bar: f64,
}

pub trait Denoiser<C>: Sync {
    fn predict(&self, req: &DenoiseRequest<'_, C>) -> Result<Vec<Image>, SchedulerError>;

    /// Prediction with all conditioning dropped. The request passed here already
    /// carries dropped conditioning and zeroed reference latents.
    fn predict_unconditional(&self, req: &DenoiseRequest<'_, C>) -> Result<Vec<Image>, SchedulerError> {
        self.predict(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Generated latents per forward pass (G′).
    pub batch_gen: usize,
    /// References per forward pass (R′).
    pub batch_ref: usize,
    pub cfg_weight: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 250, batch_gen: 4, batch_ref: 4, cfg_weight: 2.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, n_gen: usize, n_ref: usize, schedule: &NoiseSchedule) -> Result<(), SchedulerError> {
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(SchedulerError::Config(format!("steps must be in 1..={}, got {}", schedule.steps(), self.steps)));
        }
        if self.batch_gen == 0 || (n_gen > 0 && self.batch_gen > n_gen) {
            return Err(SchedulerError::Config(format!("batch_gen must be in 1..={n_gen}, got {}", self.batch_gen)));
        }
        if self.batch_ref > n_ref {
            return Err(SchedulerError::Config(format!("batch_ref {} exceeds {n_ref} references", self.batch_ref)));
        }
        if !self.cfg_weight.is_finite() {
            return Err(SchedulerError::Config("cfg_weight must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceBatch {
    pub generated: Vec<usize>,
    pub references: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    /// Target index, or `None` for the final step to the clean level.
    pub t_prev: Option<usize>,
    pub batches: Vec<TraceBatch>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerTrace {
    pub steps: Vec<TraceStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerOutput {
    pub latents: Vec<Image>,
    pub trace: SamplerTrace,
}

/// Source and target levels for each sampling step, trailing spacing. The last
/// step targets ᾱ = 1.
pub fn sampling_timesteps(schedule: &NoiseSchedule, steps: usize) -> Vec<(usize, Option<usize>)> {
    let t_max = schedule.steps();
    let ts: Vec<usize> = (1..=steps).rev().map(|k| ((k * t_max) as f64 / steps as f64).round() as usize).collect();
    ts.iter().enumerate().map(|(i, &t)| (t, ts.get(i + 1).copied())).collect()
}

fn level(schedule: &NoiseSchedule, t: Option<usize>) -> f64 {
    t.map_or(1.0, |t| schedule.alpha_bar[t])
}

/// Batch layout for one timestep: a shuffled partition of the generated set into
/// consecutive chunks of `batch_gen`, each with `batch_ref` references drawn
/// without replacement.
pub fn plan_timestep(seed: u64, step: usize, n_gen: usize, n_ref: usize, batch_gen: usize, batch_ref: usize) -> Vec<TraceBatch> {
    let mut order: Vec<usize> = (0..n_gen).collect();
    order.shuffle(&mut derive_rng(seed, &[STREAM_SHUFFLE, step as u64]));
    order
        .chunks(batch_gen)
        .enumerate()
        .map(|(b, chunk)| {
            let mut rng = derive_rng(seed, &[STREAM_REFS, step as u64, b as u64]);
            TraceBatch { generated: chunk.to_vec(), references: index::sample(&mut rng, n_ref, batch_ref).into_vec() }
        })
        .collect()
}

/// Initial noise for generated latent `i`; independent of the batching setup.
pub fn initial_noise(seed: u64, i: usize, shape: (usize, usize, usize)) -> Image {
    let mut rng = derive_rng(seed, &[STREAM_NOISE, i as u64]);
    let mut img = Image::new(shape.0, shape.1, shape.2);
    for v in &mut img.data {
        *v = StandardNormal.sample(&mut rng);
    }
    img
}

pub struct StepContext<'a, C> {
    pub z_ref: &'a [Image],
    pub c_ref: &'a [C],
    pub c_gen: &'a [C],
    pub schedule: &'a NoiseSchedule,
    pub cfg_weight: f64,
}

/// Applies one timestep: every batch reads `state` (level t) and writes its
/// latents into the returned buffer (level t_prev), so batch order is irrelevant.
pub fn apply_timestep<C: Conditioning, D: Denoiser<C> + ?Sized>(
    denoiser: &D,
    ctx: &StepContext<'_, C>,
    state: &[Image],
    t: usize,
    t_prev: Option<usize>,
    batches: &[TraceBatch],
) -> Result<Vec<Image>, SchedulerError> {
    let a_t = ctx.schedule.alpha_bar[t];
    let a_src = if a_t == 0.0 { ZERO_SNR_FLOOR } else { a_t };
    let a_prev = level(ctx.schedule, t_prev);
    let mut next: Vec<Option<Image>> = vec![None; state.len()];
    for batch in batches {
        let req = DenoiseRequest {
            noisy: batch.generated.iter().map(|&i| &state[i]).collect(),
            gen_cond: batch.generated.iter().map(|&i| &ctx.c_gen[i]).collect(),
            ref_latents: batch.references.iter().map(|&r| &ctx.z_ref[r]).collect(),
            ref_cond: batch.references.iter().map(|&r| &ctx.c_ref[r]).collect(),
            gen_indices: &batch.generated,
            t,
            alpha_bar: a_t,
        };
        let mut eps = denoiser.predict(&req)?;
        check_output(&eps, &req)?;
        if ctx.cfg_weight != 1.0 {
            let gen_dropped: Vec<C> = req.gen_cond.iter().map(|c| c.dropped()).collect();
            let ref_dropped: Vec<C> = req.ref_cond.iter().map(|c| c.dropped()).collect();
            let ref_zero: Vec<Image> = req.ref_latents.iter().map(|z| Image::new(z.height, z.width, z.channels)).collect();
            let ureq = DenoiseRequest {
                noisy: req.noisy.clone(),
                gen_cond: gen_dropped.iter().collect(),
                ref_latents: ref_zero.iter().collect(),
                ref_cond: ref_dropped.iter().collect(),
                gen_indices: req.gen_indices,
                t,
                alpha_bar: a_t,
            };
            let eps_u = denoiser.predict_unconditional(&ureq)?;
            check_output(&eps_u, &ureq)?;
            eps = eps.iter().zip(&eps_u).map(|(c, u)| cfg_combine(c, u, ctx.cfg_weight)).collect::<Result<_, _>>()?;
        }
        for (&i, e) in batch.generated.iter().zip(&eps) {
            let mut z = state[i].clone();
            for (v, ev) in z.data.iter_mut().zip(&e.data) {
                *v = ddim_update(*v, *ev, a_src, a_prev);
            }
            if next[i].replace(z).is_some() {
                return Err(SchedulerError::Config(format!("latent {i} stepped twice at t={t}")));
            }
        }
    }
    next.into_iter()
        .enumerate()
        .map(|(i, z)| z.ok_or_else(|| SchedulerError::Config(format!("latent {i} not stepped at t={t}"))))
        .collect()
}

fn check_output<C>(eps: &[Image], req: &DenoiseRequest<'_, C>) -> Result<(), SchedulerError> {
    if eps.len() != req.noisy.len() {
        return Err(SchedulerError::Denoiser(format!("expected {} predictions, got {}", req.noisy.len(), eps.len())));
    }
    for (e, z) in eps.iter().zip(&req.noisy) {
        if e.shape() != z.shape() {
            return Err(SchedulerError::ShapeMismatch(z.shape(), e.shape()));
        }
    }
    Ok(())
}

/// Runs the full sampler and returns the clean latents with the batch trace.
#[allow(clippy::too_many_arguments)]
pub fn sample_stochastic_io<C: Conditioning, D: Denoiser<C> + ?Sized>(
    denoiser: &D,
    z_ref: &[Image],
    c_ref: &[C],
    c_gen: &[C],
    latent_shape: (usize, usize, usize),
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<SamplerOutput, SchedulerError> {
    if z_ref.len() != c_ref.len() {
        return Err(SchedulerError::Config(format!("{} reference latents but {} reference conditionings", z_ref.len(), c_ref.len())));
    }
    config.validate(c_gen.len(), z_ref.len(), schedule)?;
    if c_gen.is_empty() {
        return Ok(SamplerOutput { latents: Vec::new(), trace: SamplerTrace::default() });
    }
    let ctx = StepContext { z_ref, c_ref, c_gen, schedule, cfg_weight: config.cfg_weight };
    let mut state: Vec<Image> = (0..c_gen.len()).map(|i| initial_noise(config.seed, i, latent_shape)).collect();
    let mut trace = SamplerTrace::default();
    for (step, (t, t_prev)) in sampling_timesteps(schedule, config.steps).into_iter().enumerate() {
        let batches = plan_timestep(config.seed, step, c_gen.len(), z_ref.len(), config.batch_gen, config.batch_ref);
        state = apply_timestep(denoiser, &ctx, &state, t, t_prev, &batches)?;
        log::debug!("sampler step {step}: t={t}");
        trace.steps.push(TraceStep { t, t_prev, batches });
    }
    Ok(SamplerOutput { latents: state, trace })
}
