//! Square head crops with outcropping.

use serde::{Deserialize, Serialize};

use super::camera::Camera;
use super::ConditioningError;
use crate::image::Image;
use crate::morphable_model::Mesh;

/// The tight square around the head is enlarged by this factor.
pub const CROP_ENLARGEMENT: f64 = 1.3;
pub const DEFAULT_CROP_RESOLUTION: usize = 512;
/// Value written into crop pixels that fall outside the source image.
pub const PAD_VALUE: f64 = 1.0;

/// A square window in source pixel coordinates. It may extend past the source
/// image; those parts are outcropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    /// Top-left corner (x, y) in source pixels.
    pub origin: [f64; 2],
    pub side: f64,
    pub enlargement: f64,
    pub target: usize,
    pub source_width: usize,
    pub source_height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropResult {
    pub spec: CropSpec,
    /// Camera whose image is the crop at `spec.target` resolution.
    pub camera: Camera,
    /// Row-major `target × target`; true where the crop leaves the source image.
    pub outcrop: Vec<bool>,
}

impl CropSpec {
    /// Smallest square centered on the bounding box `[x0, x1] × [y0, y1]`,
    /// enlarged by [`CROP_ENLARGEMENT`].
    pub fn from_bbox(x0: f64, x1: f64, y0: f64, y1: f64, source_width: usize, source_height: usize, target: usize) -> Self {
        let side = (x1 - x0).max(y1 - y0) * CROP_ENLARGEMENT;
        let center = [(x0 + x1) * 0.5, (y0 + y1) * 0.5];
        Self {
            origin: [center[0] - side * 0.5, center[1] - side * 0.5],
            side,
            enlargement: CROP_ENLARGEMENT,
            target,
            source_width,
            source_height,
        }
    }

    pub fn center(&self) -> [f64; 2] {
        [self.origin[0] + self.side * 0.5, self.origin[1] + self.side * 0.5]
    }

    fn scale(&self) -> f64 {
        self.target as f64 / self.side
    }

    /// Source pixel coordinate → crop pixel coordinate.
    pub fn map_point(&self, q: [f64; 2]) -> [f64; 2] {
        let s = self.scale();
        [(q[0] - self.origin[0]) * s, (q[1] - self.origin[1]) * s]
    }

    pub fn adjust_camera(&self, camera: &Camera) -> Camera {
        let s = self.scale();
        Camera {
            fx: camera.fx * s,
            fy: camera.fy * s,
            cx: (camera.cx - self.origin[0]) * s,
            cy: (camera.cy - self.origin[1]) * s,
            width: self.target,
            height: self.target,
            ..camera.clone()
        }
    }

    /// Source coordinate of the center of crop pixel `(col, row)` on a `res × res` grid.
    fn source_of(&self, col: usize, row: usize, res: usize) -> [f64; 2] {
        let step = self.side / res as f64;
        [self.origin[0] + (col as f64 + 0.5) * step, self.origin[1] + (row as f64 + 0.5) * step]
    }

    /// Outcrop mask sampled at `res × res` crop pixel centers.
    pub fn outcrop_mask(&self, res: usize) -> Vec<bool> {
        let (w, h) = (self.source_width as f64, self.source_height as f64);
        let mut out = Vec::with_capacity(res * res);
        for row in 0..res {
            for col in 0..res {
                let [x, y] = self.source_of(col, row, res);
                out.push(!(x >= 0.0 && x < w && y >= 0.0 && y < h));
            }
        }
        out
    }

    /// Resamples a source image into the crop (bilinear), padding outcropped
    /// pixels with [`PAD_VALUE`].
    pub fn crop_image(&self, source: &Image, res: usize) -> Image {
        let mut out = Image::filled(res, res, source.channels, PAD_VALUE);
        let (w, h) = (source.width as f64, source.height as f64);
        for row in 0..res {
            for col in 0..res {
                let [x, y] = self.source_of(col, row, res);
                if !(x >= 0.0 && x < w && y >= 0.0 && y < h) {
                    continue;
                }
                let fx = (x - 0.5).clamp(0.0, w - 1.0);
                let fy = (y - 0.5).clamp(0.0, h - 1.0);
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(source.width - 1), (y0 + 1).min(source.height - 1));
                let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
                let dst = out.pixel_mut(row, col);
                for (c, d) in dst.iter_mut().enumerate() {
                    let p = |r: usize, cc: usize| source.pixel(r, cc)[c];
                    *d = (1.0 - ay) * ((1.0 - ax) * p(y0, x0) + ax * p(y0, x1)) + ay * ((1.0 - ax) * p(y1, x0) + ax * p(y1, x1));
                }
            }
        }
        out
    }
}

/// Crops around the projected mesh: tight bounding box of the in-front vertices,
/// centered enclosing square, enlarged, resized to [`DEFAULT_CROP_RESOLUTION`].
pub fn fit_crop(mesh: &Mesh, camera: &Camera) -> Result<CropResult, ConditioningError> {
    fit_crop_to(mesh, camera, DEFAULT_CROP_RESOLUTION)
}

pub fn fit_crop_to(mesh: &Mesh, camera: &Camera, target: usize) -> Result<CropResult, ConditioningError> {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for v in &mesh.vertices {
        let p = camera.project(v);
        if p.in_front() {
            x0 = x0.min(p.pixel[0]);
            x1 = x1.max(p.pixel[0]);
            y0 = y0.min(p.pixel[1]);
            y1 = y1.max(p.pixel[1]);
        }
    }
    if !x0.is_finite() {
        return Err(ConditioningError::NoVisibleGeometry);
    }
    let spec = CropSpec::from_bbox(x0, x1, y0, y1, camera.width, camera.height, target);
    if !(spec.side > 0.0) {
        return Err(ConditioningError::NoVisibleGeometry);
    }
    Ok(CropResult { camera: spec.adjust_camera(camera), outcrop: spec.outcrop_mask(target), spec })
}
