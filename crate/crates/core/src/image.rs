//! Dense float images (height × width × channels, row-major, channel-minor).
//!
//! The same type carries RGB renders, diffusion latents (identity-encoded images)
//! and multi-channel conditioning maps.

use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("image shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("png encoding supports 1 or 3 channels, got {0}")]
    UnsupportedChannels(usize),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fill(height: usize, width: usize, fill: &[f64]) -> Self {
        let channels = fill.len();
        let mut data = Vec::with_capacity(height * width * channels);
        for _ in 0..height * width {
            data.extend_from_slice(fill);
        }
        Self { height, width, channels, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * self.channels
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = self.index(row, col);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = self.index(row, col);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<(), ImageError> {
        if self.shape() != other.shape() {
            return Err(ImageError::ShapeMismatch(self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64, ImageError> {
        self.check_same_shape(other)?;
        let n = self.data.len().max(1) as f64;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
    }

    pub fn mse(&self, other: &Image) -> Result<f64, ImageError> {
        self.check_same_shape(other)?;
        let n = self.data.len().max(1) as f64;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
    }

    /// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
    pub fn psnr(&self, other: &Image) -> Result<f64, ImageError> {
        let mse = self.mse(other)?;
        Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
    }

    /// Selects a contiguous channel range into a new image.
    pub fn channel_slice(&self, start: usize, count: usize) -> Image {
        let mut out = Image::new(self.height, self.width, count);
        for p in 0..self.height * self.width {
            let src = &self.data[p * self.channels + start..p * self.channels + start + count];
            out.data[p * count..(p + 1) * count].copy_from_slice(src);
        }
        out
    }

    /// Quantizes to 8 bits and writes a PNG (grayscale for 1 channel, RGB for 3).
    pub fn write_png<W: Write>(&self, writer: W) -> Result<(), ImageError> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(ImageError::UnsupportedChannels(c)),
        };
        let mut encoder = png::Encoder::new(writer, self.width as u32, self.height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut w = encoder.write_header().map_err(|e| ImageError::Png(e.to_string()))?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        w.write_image_data(&bytes).map_err(|e| ImageError::Png(e.to_string()))?;
        w.finish().map_err(|e| ImageError::Png(e.to_string()))?;
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, ImageError> {
        let mut buf = Vec::new();
        self.write_png(&mut buf)?;
        Ok(buf)
    }

    pub fn read_png(bytes: &[u8]) -> Result<Image, ImageError> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| ImageError::Png(e.to_string()))?;
        let size = reader.output_buffer_size().ok_or_else(|| ImageError::Png("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| ImageError::Png(e.to_string()))?;
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Indexed => return Err(ImageError::UnsupportedChannels(0)),
        };
        if info.bit_depth != png::BitDepth::Eight {
            return Err(ImageError::Png(format!("unsupported bit depth {:?}", info.bit_depth)));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let data = buf[..w * h * channels].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Image { height: h, width: w, channels, data })
    }

    /// Per-channel min/max normalization into a displayable image; used to
    /// visualize conditioning maps.
    pub fn normalized_for_display(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for p in 0..self.height * self.width {
                let v = self.data[p * self.channels + c];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let span = if hi > lo { hi - lo } else { 1.0 };
            for p in 0..self.height * self.width {
                let i = p * self.channels + c;
                out.data[i] = (self.data[i] - lo) / span;
            }
        }
        out
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let a = Image::filled(4, 4, 3, 0.3);
        assert!(a.psnr(&a).unwrap().is_infinite());
    }

    #[test]
    fn psnr_matches_hand_value() {
        let a = Image::filled(2, 2, 1, 0.5);
        let b = Image::filled(2, 2, 1, 0.6);
        // mse = 0.01 -> 20 dB
        assert!((a.psnr(&b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn png_roundtrip_within_quantization() {
        let mut img = Image::new(5, 7, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 17) as f64 / 16.0;
        }
        let bytes = img.to_png_bytes().unwrap();
        let back = Image::read_png(&bytes[..]).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = Image::new(2, 2, 3);
        let b = Image::new(2, 3, 3);
        assert!(matches!(a.mse(&b), Err(ImageError::ShapeMismatch(..))));
    }
}
