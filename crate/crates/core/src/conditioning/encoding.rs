//! Sinusoidal positional encoding.
//!
//! Layout is component-major, frequency-minor, sine before cosine:
//! `[x: sin(2⁰x), cos(2⁰x), …, sin(2^{L-1}x), cos(2^{L-1}x), y: …, z: …]`.

/// Frequencies used for the 3D pose maps (42 channels for 3 components).
pub const POSE_FREQUENCIES: usize = 7;
/// Frequencies used for the UV encoding fed to the deformation field (24 channels).
pub const UV_FREQUENCIES: usize = 6;

pub fn encoded_len(components: usize, frequencies: usize) -> usize {
    2 * frequencies * components
}

/// Writes the encoding of `values` into `out` (length `2·L·n`).
pub fn positional_encode_into(values: &[f64], frequencies: usize, out: &mut [f64]) {
    assert_eq!(out.len(), encoded_len(values.len(), frequencies));
    for (i, &v) in values.iter().enumerate() {
        let mut scale = 1.0;
        for l in 0..frequencies {
            let (s, c) = (scale * v).sin_cos();
            let base = 2 * (i * frequencies + l);
            out[base] = s;
            out[base + 1] = c;
            scale *= 2.0;
        }
    }
}

pub fn positional_encode(values: &[f64], frequencies: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoded_len(values.len(), frequencies)];
    positional_encode_into(values, frequencies, &mut out);
    out
}
