use super::{NoiseSchedule, SchedulerError};
use crate::image::Image;

/// One deterministic DDIM update between signal levels `a_t` → `a_prev`:
/// `√a_prev · (z − √(1−a_t)·ε)/√a_t + √(1−a_prev)·ε`.
#[inline]
pub fn ddim_update(z: f64, eps: f64, a_t: f64, a_prev: f64) -> f64 {
    let x0 = (z - (1.0 - a_t).sqrt() * eps) / a_t.sqrt();
    a_prev.sqrt() * x0 + (1.0 - a_prev).sqrt() * eps
}

pub fn ddim_step_levels(z_t: &Image, eps: &Image, a_t: f64, a_prev: f64) -> Result<Image, SchedulerError> {
    if z_t.shape() != eps.shape() {
        return Err(SchedulerError::ShapeMismatch(z_t.shape(), eps.shape()));
    }
    if a_t <= 0.0 {
        return Err(SchedulerError::ZeroSourceAlpha);
    }
    let mut out = z_t.clone();
    for (o, e) in out.data.iter_mut().zip(&eps.data) {
        *o = ddim_update(*o, *e, a_t, a_prev);
    }
    Ok(out)
}

/// DDIM step from schedule index `t` to `t_prev`.
pub fn ddim_step(z_t: &Image, eps: &Image, t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<Image, SchedulerError> {
    ddim_step_levels(z_t, eps, schedule.alpha_bar[t], schedule.alpha_bar[t_prev])
}

/// Classifier-free guidance: `ε_u + w·(ε_c − ε_u)`.
pub fn cfg_combine(eps_cond: &Image, eps_uncond: &Image, w: f64) -> Result<Image, SchedulerError> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(SchedulerError::ShapeMismatch(eps_cond.shape(), eps_uncond.shape()));
    }
    let mut out = eps_uncond.clone();
    for (o, c) in out.data.iter_mut().zip(&eps_cond.data) {
        *o += w * (c - *o);
    }
    Ok(out)
}
