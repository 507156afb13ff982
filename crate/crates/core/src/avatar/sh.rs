//! Real spherical harmonics up to degree 2 for view-dependent color.

use crate::math::Vec3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [1.092_548_430_592_079_2, -1.092_548_430_592_079_2, 0.315_391_565_252_520_05, -1.092_548_430_592_079_2, 0.546_274_215_296_039_6];

pub const MAX_SH_DEGREE: usize = 2;

pub fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values at unit direction `d`.
pub fn basis(degree: usize, d: &Vec3, out: &mut [f64]) {
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = C0;
    if degree >= 1 {
        out[1] = -C1 * y;
        out[2] = C1 * z;
        out[3] = -C1 * x;
    }
    if degree >= 2 {
        out[4] = C2[0] * x * y;
        out[5] = C2[1] * y * z;
        out[6] = C2[2] * (2.0 * z * z - x * x - y * y);
        out[7] = C2[3] * x * z;
        out[8] = C2[4] * (x * x - y * y);
    }
}

/// Σ_l g_l · ∂Y_l/∂d.
pub fn basis_backward(degree: usize, d: &Vec3, g: &[f64]) -> Vec3 {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut out = Vec3::zeros();
    if degree >= 1 {
        out.y += -C1 * g[1];
        out.z += C1 * g[2];
        out.x += -C1 * g[3];
    }
    if degree >= 2 {
        out.x += C2[0] * y * g[4];
        out.y += C2[0] * x * g[4];
        out.y += C2[1] * z * g[5];
        out.z += C2[1] * y * g[5];
        out.x += C2[2] * (-2.0 * x) * g[6];
        out.y += C2[2] * (-2.0 * y) * g[6];
        out.z += C2[2] * (4.0 * z) * g[6];
        out.x += C2[3] * z * g[7];
        out.z += C2[3] * x * g[7];
        out.x += C2[4] * 2.0 * x * g[8];
        out.y += C2[4] * (-2.0 * y) * g[8];
    }
    out
}

/// DC coefficient that produces `color` (before the +0.5 offset).
pub fn dc_for_color(color: f64) -> f64 {
    (color - 0.5) / C0
}
