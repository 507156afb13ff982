use serde::{Deserialize, Serialize};

use super::SchedulerError;
use crate::math::{logit, sigmoid};

/// Training-time step count of the base schedule.
pub const DEFAULT_TRAIN_STEPS: usize = 1000;
const BETA_START: f64 = 0.00085;
const BETA_END: f64 = 0.012;

/// Cumulative signal levels ᾱ_t for t = 0..=T; index 0 is the clean end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self, SchedulerError> {
        let s = Self { alpha_bar };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.alpha_bar.len() < 2 {
            return Err(SchedulerError::InvalidSchedule("need at least two levels".into()));
        }
        if !self.alpha_bar.iter().all(|a| (0.0..=1.0).contains(a)) {
            return Err(SchedulerError::InvalidSchedule("levels must lie in [0, 1]".into()));
        }
        if !self.alpha_bar.windows(2).all(|w| w[1] < w[0]) {
            return Err(SchedulerError::InvalidSchedule("levels must strictly decrease".into()));
        }
        Ok(())
    }

    /// Number of noising steps T.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn log_snr(&self, t: usize) -> f64 {
        logit(self.alpha_bar[t])
    }
}

/// Scaled-linear β schedule (linear in √β) with `t_max + 1` levels,
/// ᾱ_t = Π_{s ≤ t} (1 − β_s).
pub fn make_base_schedule(t_max: usize) -> NoiseSchedule {
    let t_max = t_max.max(1);
    let (a, b) = (BETA_START.sqrt(), BETA_END.sqrt());
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    let mut prod = 1.0;
    for s in 0..=t_max {
        let beta = (a + (b - a) * s as f64 / t_max as f64).powi(2);
        prod *= 1.0 - beta;
        alpha_bar.push(prod);
    }
    NoiseSchedule { alpha_bar }
}

/// Moves every log-SNR by log(√N): down (noisier) by default, up when `upward`.
/// Levels of exactly 0 or 1 have infinite log-SNR and stay where they are.
pub fn shift_snr(schedule: &NoiseSchedule, n: f64, upward: bool) -> Result<NoiseSchedule, SchedulerError> {
    if !(n >= 1.0) {
        return Err(SchedulerError::InvalidSchedule(format!("SNR shift count must be >= 1, got {n}")));
    }
    let delta = n.sqrt().ln() * if upward { 1.0 } else { -1.0 };
    let alpha_bar = schedule
        .alpha_bar
        .iter()
        .map(|&a| if a <= 0.0 || a >= 1.0 { a } else { sigmoid(logit(a) + delta) })
        .collect();
    NoiseSchedule::new(alpha_bar)
}

/// Rescales √ᾱ affinely so the last level has exactly zero SNR and the first is kept.
pub fn rescale_zero_terminal_snr(schedule: &NoiseSchedule) -> Result<NoiseSchedule, SchedulerError> {
    let sqrt: Vec<f64> = schedule.alpha_bar.iter().map(|a| a.sqrt()).collect();
    let (first, last) = (sqrt[0], *sqrt.last().unwrap());
    if !(first > last) {
        return Err(SchedulerError::FlatSchedule);
    }
    let k = first / (first - last);
    let n = sqrt.len();
    let alpha_bar = sqrt
        .iter()
        .enumerate()
        .map(|(i, &s)| match i {
            0 => schedule.alpha_bar[0],
            _ if i == n - 1 => 0.0,
            _ => ((s - last) * k).powi(2),
        })
        .collect();
    NoiseSchedule::new(alpha_bar)
}

/// Base schedule → SNR shift by log(√N) → zero-terminal rescale.
pub fn default_schedule(n_joint: f64) -> Result<NoiseSchedule, SchedulerError> {
    rescale_zero_terminal_snr(&shift_snr(&make_base_schedule(DEFAULT_TRAIN_STEPS), n_joint, false)?)
}
