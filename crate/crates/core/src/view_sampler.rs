//! Generation-time camera sampling inside an azimuth/elevation ellipse, and a
//! diverse expression database built by greedy k-center selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{Camera, ConditioningError};
use crate::math::{derive_rng, Vec3};
use crate::morphable_model::{ExpressionParams, MorphableModel};

pub const DEFAULT_PSI_MAX: f64 = 55.0;
pub const DEFAULT_THETA_MAX: f64 = 20.0;
pub const DEFAULT_DATABASE_SIZE: usize = 840;

#[derive(Debug, thiserror::Error)]
pub enum ViewSamplerError {
    #[error("need at least {needed} expression samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("invalid ellipse bounds ({0}, {1})")]
    InvalidBounds(f64, f64),
    #[error(transparent)]
    Camera(#[from] ConditioningError),
}

/// Angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewAngles {
    pub azimuth: f64,
    pub elevation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSample {
    pub azimuth: f64,
    pub elevation: f64,
    pub camera: Camera,
}

/// Intrinsics and orbit for generated views. Intrinsics are in pixels at `size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitRig {
    #[serde(with = "crate::conditioning::camera::vec3_array")]
    pub center: Vec3,
    pub distance: f64,
    pub focal: f64,
    pub size: usize,
}

impl OrbitRig {
    /// Orbit around the synthetic head at 0.6 m, framing it at about 75% of the image height.
    pub fn head(size: usize) -> Self {
        Self { center: Vec3::zeros(), distance: 0.6, focal: 2.2 * size as f64, size }
    }

    /// Camera at (ψ, θ) degrees on the sphere around `center`; ψ = θ = 0 looks
    /// along −z at the face, positive θ looks from above.
    pub fn camera(&self, azimuth: f64, elevation: f64) -> Result<Camera, ConditioningError> {
        let (psi, theta) = (azimuth.to_radians(), elevation.to_radians());
        let dir = Vec3::new(psi.sin() * theta.cos(), theta.sin(), psi.cos() * theta.cos());
        let c = self.size as f64 / 2.0;
        Camera::look_at(self.center + dir * self.distance, self.center, Vec3::new(0.0, 1.0, 0.0), self.focal, self.focal, c, c, self.size, self.size)
    }
}

#[inline]
pub fn in_ellipse(azimuth: f64, elevation: f64, psi_max: f64, theta_max: f64) -> bool {
    (azimuth / psi_max).powi(2) + (elevation / theta_max).powi(2) < 1.0
}

/// Radially projects a point outside the ellipse to just inside its boundary.
/// Returns the input unchanged (and `false`) when it is already admissible.
pub fn clamp_to_ellipse(azimuth: f64, elevation: f64, psi_max: f64, theta_max: f64) -> (f64, f64, bool) {
    if in_ellipse(azimuth, elevation, psi_max, theta_max) {
        return (azimuth, elevation, false);
    }
    let r = ((azimuth / psi_max).powi(2) + (elevation / theta_max).powi(2)).sqrt();
    let s = (1.0 - 1e-9) / r;
    (azimuth * s, elevation * s, true)
}

/// Draws one admissible (ψ, θ) by rejection from the bounding rectangle and
/// reports how many draws it took.
pub fn sample_angles(rng: &mut impl Rng, psi_max: f64, theta_max: f64) -> (ViewAngles, usize) {
    let mut draws = 0;
    loop {
        draws += 1;
        let a = rng.random_range(-psi_max..psi_max);
        let e = rng.random_range(-theta_max..theta_max);
        if in_ellipse(a, e, psi_max, theta_max) {
            return (ViewAngles { azimuth: a, elevation: e }, draws);
        }
    }
}

pub fn sample_views(count: usize, psi_max: f64, theta_max: f64, rig: &OrbitRig, seed: u64) -> Result<Vec<ViewSample>, ViewSamplerError> {
    if !(psi_max > 0.0 && theta_max > 0.0) {
        return Err(ViewSamplerError::InvalidBounds(psi_max, theta_max));
    }
    let mut rng = derive_rng(seed, &[0x7E_01]);
    (0..count)
        .map(|_| {
            let (v, _) = sample_angles(&mut rng, psi_max, theta_max);
            Ok(ViewSample { azimuth: v.azimuth, elevation: v.elevation, camera: rig.camera(v.azimuth, v.elevation)? })
        })
        .collect()
}

/// Per-blendshape weight: the largest per-vertex displacement of its column.
pub fn blendshape_weights(model: &MorphableModel) -> Vec<f64> {
    (0..model.k_expr).map(|k| model.expression_column(k).iter().map(|v| v.norm()).fold(0.0, f64::max)).collect()
}

/// Expression samples drawn uniformly from `[-limit, limit]^K`.
pub fn random_expressions(k_expr: usize, count: usize, limit: f64, seed: u64) -> Vec<ExpressionParams> {
    let mut rng = derive_rng(seed, &[0xE8_01]);
    (0..count).map(|_| ExpressionParams((0..k_expr).map(|_| rng.random_range(-limit..=limit)).collect())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionDatabase {
    pub representatives: Vec<ExpressionParams>,
    /// Indices of the representatives in the input samples, in pick order.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

fn weighted_sq_dist(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), w)| (w * (x - y)).powi(2)).sum()
}

/// Greedy farthest-point selection under `‖w ⊙ (a − b)‖`, seeded with the medoid
/// (the sample minimizing its largest distance to all others). Ties resolve to
/// the lowest index. `seed` is accepted for interface stability; the selection
/// itself is deterministic.
pub fn build_expression_database(
    samples: &[ExpressionParams],
    count: usize,
    weights: &[f64],
    _seed: u64,
) -> Result<ExpressionDatabase, ViewSamplerError> {
    if samples.len() < count || count == 0 {
        return Err(ViewSamplerError::InsufficientSamples { needed: count.max(1), got: samples.len() });
    }
    let n = samples.len();
    let d = |i: usize, j: usize| weighted_sq_dist(&samples[i].0, &samples[j].0, weights);
    let mut first = 0;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let worst = (0..n).map(|j| d(i, j)).fold(0.0, f64::max);
        if worst < best {
            best = worst;
            first = i;
        }
    }
    let mut indices = vec![first];
    let mut min_d: Vec<f64> = (0..n).map(|j| d(first, j)).collect();
    while indices.len() < count {
        let mut pick = 0;
        let mut far = f64::NEG_INFINITY;
        for (j, &m) in min_d.iter().enumerate() {
            if m > far {
                far = m;
                pick = j;
            }
        }
        indices.push(pick);
        for (j, m) in min_d.iter_mut().enumerate() {
            *m = m.min(d(pick, j));
        }
    }
    Ok(ExpressionDatabase {
        representatives: indices.iter().map(|&i| samples[i].clone()).collect(),
        indices,
        weights: weights.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable_model::synth_model;
    use rand::seq::index;
    use std::collections::HashSet;

    fn rig() -> OrbitRig {
        OrbitRig { center: Vec3::zeros(), distance: 0.6, focal: 800.0, size: 512 }
    }

    #[test]
    fn samples_lie_strictly_inside_the_ellipse() {
        let views = sample_views(2000, 55.0, 20.0, &rig(), 1).unwrap();
        for v in &views {
            assert!((v.azimuth / 55.0).powi(2) + (v.elevation / 20.0).powi(2) < 1.0);
        }
        assert!(in_ellipse(0.0, 0.0, 55.0, 20.0));
        assert!(!in_ellipse(55.0, 0.0, 55.0, 20.0));
    }

    #[test]
    fn acceptance_rate_is_quarter_pi() {
        let mut rng = derive_rng(2, &[]);
        let mut accepted = 0;
        let mut draws = 0;
        while draws < 100_000 {
            let (_, d) = sample_angles(&mut rng, 55.0, 20.0);
            draws += d;
            accepted += 1;
        }
        let rate = accepted as f64 / draws as f64;
        assert!((rate - std::f64::consts::FRAC_PI_4).abs() < 0.01, "{rate}");
    }

    #[test]
    fn angle_means_are_centered() {
        let views = sample_views(4000, 55.0, 20.0, &rig(), 3).unwrap();
        let n = views.len() as f64;
        for get in [|v: &ViewSample| v.azimuth, |v: &ViewSample| v.elevation] {
            let xs: Vec<f64> = views.iter().map(get).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!(mean.abs() < 3.0 * sd / n.sqrt());
        }
    }

    #[test]
    fn orbit_camera_looks_at_center_from_distance() {
        let cam = rig().camera(30.0, 10.0).unwrap();
        assert!((cam.center().norm() - 0.6).abs() < 1e-12);
        let p = cam.project(&Vec3::zeros());
        assert!((p.pixel[0] - 256.0).abs() < 1e-9 && (p.pixel[1] - 256.0).abs() < 1e-9);
        // positive elevation looks from above
        assert!(cam.center().y > 0.0);
    }

    #[test]
    fn clamp_lands_inside() {
        let (a, e, clamped) = clamp_to_ellipse(80.0, 30.0, 55.0, 20.0);
        assert!(clamped && in_ellipse(a, e, 55.0, 20.0));
        assert_eq!(clamp_to_ellipse(10.0, 5.0, 55.0, 20.0), (10.0, 5.0, false));
    }

    #[test]
    fn weights_are_max_vertex_norms() {
        let mut model = synth_model(0, 0, 1, 3);
        model.expression_basis.fill(0.0);
        let k = model.k_expr;
        model.expression_basis[(5 * 3) * k] = 1.0;
        let w = blendshape_weights(&model);
        assert_eq!(w, vec![1.0, 0.0, 0.0]);

        let model = synth_model(4, 1, 1, 4);
        let w = blendshape_weights(&model);
        for (kk, wk) in w.iter().enumerate() {
            let mut naive: f64 = 0.0;
            for v in 0..model.num_vertices() {
                let s: f64 = (0..3).map(|c| model.expression_basis[(v * 3 + c) * model.k_expr + kk].powi(2)).sum();
                naive = naive.max(s.sqrt());
            }
            assert_eq!(*wk, naive);
        }
    }

    #[test]
    fn full_database_is_the_sample_set() {
        let s = random_expressions(3, 12, 1.0, 0);
        let db = build_expression_database(&s, 12, &[1.0; 3], 0).unwrap();
        let idx: HashSet<_> = db.indices.iter().collect();
        assert_eq!(idx.len(), 12);
        assert!(matches!(build_expression_database(&s, 13, &[1.0; 3], 0), Err(ViewSamplerError::InsufficientSamples { .. })));
    }

    #[test]
    fn two_clusters_get_one_representative_each() {
        let mut rng = derive_rng(5, &[]);
        let mut s = Vec::new();
        for c in [-5.0, 5.0] {
            for _ in 0..10 {
                s.push(ExpressionParams(vec![c + rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]));
            }
        }
        let db = build_expression_database(&s, 2, &[1.0, 1.0], 0).unwrap();
        let sides: HashSet<bool> = db.representatives.iter().map(|e| e.0[0] > 0.0).collect();
        assert_eq!(sides.len(), 2);
        // exhaustive oracle: every best-separated pair straddles the clusters
        let mut best = 0.0;
        for i in 0..20 {
            for j in i + 1..20 {
                best = f64::max(best, weighted_sq_dist(&s[i].0, &s[j].0, &[1.0, 1.0]));
            }
        }
        assert!(best > 81.0);
    }

    #[test]
    fn greedy_set_dominates_random_subsets() {
        for seed in 0..5 {
            let s = random_expressions(4, 120, 1.0, seed);
            let w = [1.0, 0.5, 2.0, 1.0];
            let g = 10;
            let db = build_expression_database(&s, g, &w, 0).unwrap();
            let min_pair = |idx: &[usize]| {
                let mut m = f64::INFINITY;
                for a in 0..idx.len() {
                    for b in a + 1..idx.len() {
                        m = m.min(weighted_sq_dist(&s[idx[a]].0, &s[idx[b]].0, &w));
                    }
                }
                m
            };
            let ours = min_pair(&db.indices);
            let mut rng = derive_rng(seed, &[9]);
            for _ in 0..100 {
                let r = index::sample(&mut rng, s.len(), g).into_vec();
                assert!(ours >= min_pair(&r));
            }
        }
    }

    #[test]
    fn selection_is_invariant_to_uniform_weight_scale() {
        let s = random_expressions(3, 60, 1.0, 8);
        let a = build_expression_database(&s, 8, &[1.0, 2.0, 0.5], 0).unwrap();
        let b = build_expression_database(&s, 8, &[4.0, 8.0, 2.0], 0).unwrap();
        assert_eq!(a.indices, b.indices);
    }
}
