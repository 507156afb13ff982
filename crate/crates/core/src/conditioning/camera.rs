use serde::{Deserialize, Serialize};

use super::ConditioningError;
use crate::math::{Mat3, Vec3};

/// Pinhole camera with world-to-camera extrinsics.
///
/// Camera space is x right, y down, z forward; pixel `(col, row)` covers
/// `[col, col+1) × [row, row+1)` so its center sits at `(col + 0.5, row + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(with = "mat3_rows")]
    pub rotation: Mat3,
    #[serde(with = "vec3_array")]
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
}

impl Projection {
    /// Points at or behind the image plane are not rasterized.
    pub fn in_front(&self) -> bool {
        self.depth > 0.0
    }
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self, ConditioningError> {
        let cam = Self { fx, fy, cx, cy, rotation, translation, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), ConditioningError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(ConditioningError::InvalidCamera("focal lengths must be positive".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        if !(err <= 1e-9) {
            return Err(ConditioningError::InvalidCamera(format!("rotation not orthonormal ({err:e})")));
        }
        if ![self.cx, self.cy].iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(ConditioningError::InvalidCamera("non-finite parameters".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` giving the world up direction
    /// (image rows grow opposite to it). Zero roll.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, ConditioningError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(fx, fy, cx, cy, rotation, translation, width, height)
    }

    #[inline]
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn project(&self, p: &Vec3) -> Projection {
        let c = self.to_camera(p);
        Projection {
            pixel: [self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy],
            depth: c.z,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Same pose, intrinsics rescaled to a new image size.
    pub fn resized(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }

    /// The camera that sees the world transformed by `p ↦ R·p + t` exactly as
    /// this camera sees the original world.
    pub fn after_world_transform(&self, rotation: &Mat3, translation: &Vec3) -> Camera {
        let r = self.rotation * rotation.transpose();
        Camera { rotation: r, translation: self.translation - r * translation, ..self.clone() }
    }
}

pub fn project_points(camera: &Camera, points: &[Vec3]) -> Vec<Projection> {
    points.iter().map(|p| camera.project(p)).collect()
}

pub(crate) mod mat3_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::math::Mat3;

    pub fn serialize<S: Serializer>(m: &Mat3, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat3, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Mat3::from_fn(|r, c| rows[r][c]))
    }
}

pub(crate) mod vec3_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::math::Vec3;

    pub fn serialize<S: Serializer>(v: &Vec3, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec3, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vec3::new(a[0], a[1], a[2]))
    }
}
