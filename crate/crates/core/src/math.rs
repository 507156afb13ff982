//! Small numeric helpers shared by the geometry, rendering and sampling code.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Quaternion stored as `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const QUAT_IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize(q: &Quat) -> Quat {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Hamilton product `a * b`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_conj(q: &Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_mat(q: &Quat) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to the (already unit) quaternion
/// components used to build it.
pub fn quat_to_mat_backward(q: &Quat, g: &Mat3) -> Quat {
    let [w, x, y, z] = *q;
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}

/// Gradient of `q / |q|` with respect to `q`, given the gradient on the normalized value.
pub fn quat_normalize_backward(q: &Quat, g_unit: &Quat) -> Quat {
    let n = quat_norm(q);
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let dot = u[0] * g_unit[0] + u[1] * g_unit[1] + u[2] * g_unit[2] + u[3] * g_unit[3];
    [
        (g_unit[0] - u[0] * dot) / n,
        (g_unit[1] - u[1] * dot) / n,
        (g_unit[2] - u[2] * dot) / n,
        (g_unit[3] - u[3] * dot) / n,
    ]
}

/// Gradient of `a / |a|` with respect to `a`.
pub fn normalize_backward(a: &Vec3, g: &Vec3) -> Vec3 {
    let n = a.norm();
    let u = a / n;
    (g - u * u.dot(g)) / n
}

/// Rotation about the world y axis by `angle` radians.
pub fn rot_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation about the world x axis by `angle` radians.
pub fn rot_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Rotation from an axis-angle vector (Rodrigues).
pub fn rot_from_axis_angle(v: &Vec3) -> Mat3 {
    let angle = v.norm();
    if angle < 1e-300 {
        return Mat3::identity();
    }
    let axis = nalgebra::Unit::new_normalize(*v);
    *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent generator from a root seed and a path of stream keys.
///
/// Streams with different key paths never share state, so e.g. the initial noise
/// of a sampler run does not depend on how many batches later consume randomness.
pub fn derive_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_quat_grad(q: &Quat, g: &Mat3) -> Quat {
        let h = 1e-6;
        let mut out = [0.0; 4];
        for k in 0..4 {
            let mut qp = *q;
            let mut qm = *q;
            qp[k] += h;
            qm[k] -= h;
            let fp = quat_to_mat(&qp).component_mul(g).sum();
            let fm = quat_to_mat(&qm).component_mul(g).sum();
            out[k] = (fp - fm) / (2.0 * h);
        }
        out
    }

    #[test]
    fn quat_matrix_backward_matches_finite_differences() {
        let q = quat_normalize(&[0.8, -0.3, 0.4, 0.2]);
        let g = Mat3::new(0.3, -1.2, 0.5, 0.7, 0.1, -0.4, 2.0, 0.9, -0.6);
        let analytic = quat_to_mat_backward(&q, &g);
        let fd = fd_quat_grad(&q, &g);
        for k in 0..4 {
            assert!((analytic[k] - fd[k]).abs() < 1e-8, "{k}: {analytic:?} vs {fd:?}");
        }
    }

    #[test]
    fn quat_matrix_is_rotation() {
        let q = quat_normalize(&[0.1, 0.7, -0.2, 0.4]);
        let r = quat_to_mat(&q);
        assert!((r.transpose() * r - Mat3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quat_product_matches_matrix_product() {
        let a = quat_normalize(&[0.3, 0.1, -0.5, 0.2]);
        let b = quat_normalize(&[-0.2, 0.6, 0.3, 0.1]);
        let lhs = quat_to_mat(&quat_mul(&a, &b));
        let rhs = quat_to_mat(&a) * quat_to_mat(&b);
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_in_both_tails() {
        assert_eq!(sigmoid(f64::NEG_INFINITY), 0.0);
        assert_eq!(sigmoid(f64::INFINITY), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!((logit(sigmoid(1.7)) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn derived_streams_differ() {
        use rand::Rng;
        let a: u64 = derive_rng(7, &[1]).random();
        let b: u64 = derive_rng(7, &[2]).random();
        let c: u64 = derive_rng(7, &[1]).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
