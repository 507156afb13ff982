//! Procedural head models with the same structure as a real morphable model.
//!
//! The template is a latitude–longitude ellipsoid (face toward +z, up +y). The UV
//! atlas is a sinusoidal (pseudo-cylindrical, equal-area) projection: longitude
//! scaled by the sine of the polar angle, so both poles land on single UV points
//! and the only seam runs down the back of the head. Seam vertices are duplicated
//! with bit-identical positions and basis values.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::MorphableModel;
use crate::math::{derive_rng, Vec3};

/// Head semi-axes in meters (x: ear to ear, y: chin to crown, z: back to nose).
pub const HEAD_SEMI_AXES: [f64; 3] = [0.075, 0.10, 0.09];
const IDENTITY_AMPLITUDE: f64 = 0.008;
const EXPRESSION_AMPLITUDE: f64 = 0.004;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub n_subdiv: u32,
    pub k_id: usize,
    pub k_expr: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { seed: 0, n_subdiv: 2, k_id: 16, k_expr: 10 }
    }
}

/// Smooth scalar field on the unit sphere: quadratic polynomial in the direction.
fn poly_features(d: &Vec3) -> [f64; 10] {
    [1.0, d.x, d.y, d.z, d.x * d.x, d.y * d.y, d.z * d.z, d.x * d.y, d.y * d.z, d.x * d.z]
}

fn ellipsoid_normal(d: &Vec3) -> Vec3 {
    let [a, b, c] = HEAD_SEMI_AXES;
    Vec3::new(d.x / a, d.y / b, d.z / c).normalize()
}

/// Random low-frequency displacement fields, one per basis column, each scaled so
/// its largest per-vertex displacement equals `amplitude`.
fn random_basis(
    dirs: &[Vec3],
    k: usize,
    amplitude: f64,
    window: impl Fn(&Vec3) -> f64,
    rng: &mut impl Rng,
) -> Vec<Vec<Vec3>> {
    (0..k)
        .map(|_| {
            let normal_coef: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
            let tangent: Vec<[f64; 3]> =
                (0..4).map(|_| [0.0; 3].map(|_: f64| 0.3 * rng.sample::<f64, _>(StandardNormal))).collect();
            let mut col: Vec<Vec3> = dirs
                .iter()
                .map(|d| {
                    let f = poly_features(d);
                    let s: f64 = f.iter().zip(&normal_coef).map(|(a, b)| a * b).sum();
                    let mut disp = ellipsoid_normal(d) * s;
                    for (j, t) in tangent.iter().enumerate() {
                        disp += Vec3::new(t[0], t[1], t[2]) * f[j];
                    }
                    disp * window(d)
                })
                .collect();
            let max = col.iter().map(|v| v.norm()).fold(0.0, f64::max);
            let scale = if max > 0.0 { amplitude / max } else { 0.0 };
            for v in &mut col {
                *v *= scale;
            }
            col
        })
        .collect()
}

fn pack_basis(cols: &[Vec<Vec3>], nv: usize) -> Vec<f64> {
    let k = cols.len();
    let mut out = vec![0.0; nv * 3 * k];
    for (j, col) in cols.iter().enumerate() {
        for (v, d) in col.iter().enumerate() {
            for c in 0..3 {
                out[(v * 3 + c) * k + j] = d[c];
            }
        }
    }
    out
}

/// Deterministic procedural head. `n_subdiv` doubles the longitude and latitude
/// resolution per level (8·2ⁿ columns, 4·2ⁿ latitude bands).
pub fn synth_model(seed: u64, n_subdiv: u32, k_id: usize, k_expr: usize) -> MorphableModel {
    let n_lon = 8usize << n_subdiv;
    let n_bands = 4usize << n_subdiv;
    let [ax, ay, az] = HEAD_SEMI_AXES;

    let mut dirs: Vec<Vec3> = Vec::new();
    let mut uv: Vec<[f64; 2]> = Vec::new();

    // Interior rings, top to bottom. Column `n_lon` duplicates column 0 on the
    // other side of the seam.
    let mut ring_index = vec![vec![0u32; n_lon + 1]; n_bands - 1];
    for (j, ring) in ring_index.iter_mut().enumerate() {
        let polar = std::f64::consts::PI * (j + 1) as f64 / n_bands as f64;
        let (sp, cp) = polar.sin_cos();
        let v = 1.0 - polar / std::f64::consts::PI;
        let first = dirs.len();
        for (i, slot) in ring.iter_mut().enumerate() {
            *slot = dirs.len() as u32;
            let lon_frac = i as f64 / n_lon as f64 - 0.5;
            if i == n_lon {
                dirs.push(dirs[first]);
            } else {
                let lon = 2.0 * std::f64::consts::PI * lon_frac;
                let (sl, cl) = lon.sin_cos();
                dirs.push(Vec3::new(sp * sl, cp, sp * cl));
            }
            uv.push([0.5 + lon_frac * sp, v]);
        }
    }
    let top = dirs.len() as u32;
    dirs.push(Vec3::new(0.0, 1.0, 0.0));
    uv.push([0.5, 1.0]);
    let bottom = dirs.len() as u32;
    dirs.push(Vec3::new(0.0, -1.0, 0.0));
    uv.push([0.5, 0.0]);

    let template: Vec<Vec3> = dirs.iter().map(|d| Vec3::new(ax * d.x, ay * d.y, az * d.z)).collect();

    let mut triangles: Vec<[u32; 3]> = Vec::new();
    for i in 0..n_lon {
        triangles.push([top, ring_index[0][i], ring_index[0][i + 1]]);
    }
    for j in 0..n_bands - 2 {
        for i in 0..n_lon {
            let a = ring_index[j][i];
            let b = ring_index[j][i + 1];
            let c = ring_index[j + 1][i];
            let d = ring_index[j + 1][i + 1];
            triangles.push([a, c, d]);
            triangles.push([a, d, b]);
        }
    }
    let last = n_bands - 2;
    for i in 0..n_lon {
        triangles.push([bottom, ring_index[last][i + 1], ring_index[last][i]]);
    }
    // Outward orientation for the star-shaped template.
    for tri in &mut triangles {
        let [a, b, c] = tri.map(|i| template[i as usize]);
        let n = (b - a).cross(&(c - a));
        if n.dot(&((a + b + c) / 3.0)) < 0.0 {
            tri.swap(1, 2);
        }
    }

    let mut rng = derive_rng(seed, &[0x5E_ED]);
    let id_cols = random_basis(&dirs, k_id, IDENTITY_AMPLITUDE, |_| 1.0, &mut rng);
    // Expressions concentrate on the face and fade out toward the ears.
    let ex_cols = random_basis(&dirs, k_expr, EXPRESSION_AMPLITUDE, |d| d.z.max(0.0).powi(2), &mut rng);
    let nv = template.len();

    let (zmin, zmax) = template.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.z), hi.max(p.z)));
    let cut = zmin + (zmax - zmin) / 3.0;
    let static_mask = template.iter().map(|p| p.z < cut).collect();

    MorphableModel::new(
        template,
        triangles,
        pack_basis(&id_cols, nv),
        k_id,
        pack_basis(&ex_cols, nv),
        k_expr,
        Some(uv),
        static_mask,
    )
    .expect("synthetic model is structurally valid")
}
