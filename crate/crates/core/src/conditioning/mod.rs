//! Conditioning maps for the multi-view generator: pose (positionally encoded
//! template coordinates), expression offsets, per-pixel view directions and the
//! binary masks, all rendered at latent resolution.

pub mod camera;
pub mod crop;
pub mod encoding;
pub mod raster;
pub mod shading;

use serde::{Deserialize, Serialize};

pub use camera::{project_points, Camera, Projection};
pub use crop::{fit_crop, fit_crop_to, CropResult, CropSpec, CROP_ENLARGEMENT, DEFAULT_CROP_RESOLUTION, PAD_VALUE};
pub use encoding::{positional_encode, positional_encode_into, POSE_FREQUENCIES, UV_FREQUENCIES};
pub use raster::{rasterize, rasterize_attributes, Fragment, FragmentBuffer};
pub use shading::TexturedMeshRenderer;

use crate::image::Image;
use crate::math::Vec3;
use crate::morphable_model::{ExpressionParams, IdentityParams, Mesh, ModelError, MorphableModel};

pub const POSE_CHANNELS: usize = 6 * POSE_FREQUENCIES;
pub const CONDITIONING_CHANNELS: usize = POSE_CHANNELS + 3 + 3 + 2;
pub const DEFAULT_LATENT_RESOLUTION: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum ConditioningError {
    #[error("no mesh vertex projects in front of the camera")]
    NoVisibleGeometry,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("{what}: expected {expected} values, got {got}")]
    AttributeShape { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Parameters a conditioning set was built from. Carried alongside the maps so
/// verification denoisers can re-render the intended target; the maps themselves
/// are what a learned denoiser would consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSource {
    pub beta: IdentityParams,
    pub phi: ExpressionParams,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSet {
    pub pose_map: Image,
    pub expr_map: Image,
    pub view_map: Image,
    /// Row-major; true where the crop left the source image.
    pub mask_outcrop: Vec<bool>,
    pub is_reference: bool,
    pub source: ViewSource,
}

impl ConditioningSet {
    pub fn height(&self) -> usize {
        self.pose_map.height
    }

    pub fn width(&self) -> usize {
        self.pose_map.width
    }

    pub fn with_outcrop(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.height() * self.width());
        self.mask_outcrop = mask;
        self
    }

    /// Channel stack `[pose 42 | expr 3 | view 3 | outcrop 1 | reference flag 1]`.
    pub fn to_tensor(&self) -> Image {
        let (h, w) = (self.height(), self.width());
        let mut out = Image::new(h, w, CONDITIONING_CHANNELS);
        let flag = if self.is_reference { 1.0 } else { 0.0 };
        for p in 0..h * w {
            let dst = &mut out.data[p * CONDITIONING_CHANNELS..(p + 1) * CONDITIONING_CHANNELS];
            dst[..POSE_CHANNELS].copy_from_slice(&self.pose_map.data[p * POSE_CHANNELS..(p + 1) * POSE_CHANNELS]);
            dst[POSE_CHANNELS..POSE_CHANNELS + 3].copy_from_slice(&self.expr_map.data[p * 3..p * 3 + 3]);
            dst[POSE_CHANNELS + 3..POSE_CHANNELS + 6].copy_from_slice(&self.view_map.data[p * 3..p * 3 + 3]);
            dst[POSE_CHANNELS + 6] = if self.mask_outcrop[p] { 1.0 } else { 0.0 };
            dst[POSE_CHANNELS + 7] = flag;
        }
        out
    }

    /// All conditioning removed, as used for the unconditional guidance branch.
    pub fn dropped(&self) -> ConditioningSet {
        let zero = |img: &Image| Image::new(img.height, img.width, img.channels);
        ConditioningSet {
            pose_map: zero(&self.pose_map),
            expr_map: zero(&self.expr_map),
            view_map: zero(&self.view_map),
            mask_outcrop: vec![false; self.mask_outcrop.len()],
            is_reference: false,
            source: self.source.clone(),
        }
    }
}

/// Encoded template coordinates of the visible surface; zero where uncovered.
pub fn make_pose_map(mesh: &Mesh, model: &MorphableModel, camera: &Camera, height: usize, width: usize) -> Result<Image, ConditioningError> {
    check_len("mesh vertices", model.num_vertices(), mesh.vertices.len())?;
    let attrs: Vec<f64> = model.template.iter().flat_map(|p| model.pose_normalization.apply(p)).collect();
    let frags = rasterize(&mesh.vertices, &mesh.triangles, camera, height, width);
    let coords = frags.interpolate(&mesh.triangles, &attrs, 3, &[0.0; 3]);
    let mut out = Image::new(height, width, POSE_CHANNELS);
    for (p, f) in frags.fragments.iter().enumerate() {
        if f.is_some() {
            positional_encode_into(
                &coords.data[p * 3..p * 3 + 3],
                POSE_FREQUENCIES,
                &mut out.data[p * POSE_CHANNELS..(p + 1) * POSE_CHANNELS],
            );
        }
    }
    Ok(out)
}

/// Rasterized per-vertex expression offsets in meters; zero where uncovered.
pub fn make_expression_map(mesh: &Mesh, offsets: &[Vec3], camera: &Camera, height: usize, width: usize) -> Result<Image, ConditioningError> {
    check_len("expression offsets", mesh.vertices.len(), offsets.len())?;
    let attrs: Vec<f64> = offsets.iter().flat_map(|o| [o.x, o.y, o.z]).collect();
    Ok(rasterize_attributes(&mesh.vertices, &mesh.triangles, &attrs, 3, camera, height, width, &[0.0; 3]).0)
}

/// Direction of the ray through a pixel coordinate, in the first camera's frame.
pub fn view_direction(camera: &Camera, first_camera: &Camera, u: f64, v: f64) -> Vec3 {
    let ray = Vec3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
    (first_camera.rotation * (camera.rotation.transpose() * ray)).normalize()
}

pub fn make_view_direction_map(camera: &Camera, first_camera: &Camera, height: usize, width: usize) -> Image {
    let mut out = Image::new(height, width, 3);
    for row in 0..height {
        for col in 0..width {
            let d = view_direction(camera, first_camera, col as f64 + 0.5, row as f64 + 0.5);
            out.pixel_mut(row, col).copy_from_slice(d.as_slice());
        }
    }
    out
}

/// Builds every map for one view at `latent_res × latent_res`. `camera` and
/// `first_camera` may be at any image resolution; their intrinsics are rescaled.
pub fn assemble_conditioning_set(
    model: &MorphableModel,
    beta: &IdentityParams,
    phi: &ExpressionParams,
    camera: &Camera,
    first_camera: &Camera,
    is_reference: bool,
    latent_res: usize,
) -> Result<ConditioningSet, ConditioningError> {
    camera.validate()?;
    first_camera.validate()?;
    let mesh = model.evaluate_mesh(beta, phi)?;
    let offsets = model.neutral_expression_offsets(beta, phi)?;
    let latent_cam = camera.resized(latent_res, latent_res);
    let latent_first = first_camera.resized(latent_res, latent_res);
    Ok(ConditioningSet {
        pose_map: make_pose_map(&mesh, model, &latent_cam, latent_res, latent_res)?,
        expr_map: make_expression_map(&mesh, &offsets, &latent_cam, latent_res, latent_res)?,
        view_map: make_view_direction_map(&latent_cam, &latent_first, latent_res, latent_res),
        mask_outcrop: vec![false; latent_res * latent_res],
        is_reference,
        source: ViewSource { beta: beta.clone(), phi: phi.clone(), camera: camera.clone() },
    })
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), ConditioningError> {
    if expected != got {
        return Err(ConditioningError::AttributeShape { what, expected, got });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{derive_rng, rot_from_axis_angle, rot_y};
    use crate::morphable_model::synth_model;
    use rand::Rng;

    fn front_camera(res: usize) -> Camera {
        let f = res as f64 * 1.6;
        Camera::look_at(Vec3::new(0.0, 0.0, 0.55), Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0), f, f, res as f64 / 2.0, res as f64 / 2.0, res, res).unwrap()
    }

    #[test]
    fn channel_counts() {
        let model = synth_model(0, 1, 4, 3);
        let set = assemble_conditioning_set(
            &model,
            &IdentityParams::zeros(4),
            &ExpressionParams::zeros(3),
            &front_camera(512),
            &front_camera(512),
            true,
            32,
        )
        .unwrap();
        assert_eq!(set.pose_map.channels, 42);
        assert_eq!(set.expr_map.channels, 3);
        assert_eq!(set.to_tensor().channels, 50);
        assert_eq!(set.to_tensor().shape(), (32, 32, 50));
    }

    #[test]
    fn assembling_is_deterministic_and_keeps_the_flag() {
        let model = synth_model(2, 1, 4, 3);
        let beta = IdentityParams(vec![0.5, -0.2, 0.1, 0.0]);
        let phi = ExpressionParams(vec![1.0, 0.0, -1.0]);
        for flag in [true, false] {
            let a = assemble_conditioning_set(&model, &beta, &phi, &front_camera(512), &front_camera(512), flag, 24).unwrap();
            let b = assemble_conditioning_set(&model, &beta, &phi, &front_camera(512), &front_camera(512), flag, 24).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.is_reference, flag);
            assert_eq!(a.to_tensor().data[49], if flag { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn pose_map_at_projected_vertex_encodes_that_vertex() {
        let model = synth_model(4, 2, 2, 2);
        let mesh = model.template_mesh();
        let res = 96;
        let base = front_camera(res);
        let mut checked = 0;
        for (i, v) in mesh.vertices.iter().enumerate().filter(|(_, v)| v.z > 0.06).take(12) {
            // shift the principal point so this vertex lands on a pixel center
            let p = base.project(v).pixel;
            let cam = Camera { cx: base.cx + 48.5 - p[0], cy: base.cy + 40.5 - p[1], ..base.clone() };
            let map = make_pose_map(&mesh, &model, &cam, res, res).unwrap();
            let idx = 40 * res + 48;
            let expect = positional_encode(&model.pose_normalization.apply(&model.template[i]), POSE_FREQUENCIES);
            let got = &map.data[idx * 42..(idx + 1) * 42];
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
            checked += 1;
        }
        assert_eq!(checked, 12);
    }

    #[test]
    fn rasterized_vertex_attributes_match_projection() {
        // A jittered-depth grid whose vertices project exactly onto pixel centers:
        // wherever the front-most triangle at a vertex's pixel contains that vertex,
        // the interpolated attribute equals the vertex attribute.
        let mut rng = derive_rng(9, &[]);
        let res = 24;
        let cam = Camera::new(12.0, 12.0, 12.0, 12.0, crate::math::Mat3::identity(), Vec3::zeros(), res, res).unwrap();
        let n = 7;
        let mut verts = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let (px, py) = (2.5 + 3.0 * i as f64, 2.5 + 3.0 * j as f64);
                let z = rng.random_range(1.0..1.5);
                verts.push(Vec3::new((px - 12.0) / 12.0 * z, (py - 12.0) / 12.0 * z, z));
            }
        }
        let mut tris = Vec::new();
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let a = (j * n + i) as u32;
                tris.push([a, a + 1, a + n as u32 + 1]);
                tris.push([a, a + n as u32 + 1, a + n as u32]);
            }
        }
        let attrs: Vec<f64> = (0..verts.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let frags = rasterize(&verts, &tris, &cam, res, res);
        let img = frags.interpolate(&tris, &attrs, 1, &[0.0]);
        let mut checked = 0;
        for (i, v) in verts.iter().enumerate() {
            let p = cam.project(v).pixel;
            let idx = p[1].floor() as usize * res + p[0].floor() as usize;
            if let Some(f) = frags.fragments[idx] {
                if tris[f.triangle as usize].contains(&(i as u32)) {
                    assert!((img.data[idx] - attrs[i]).abs() <= 1e-6);
                    checked += 1;
                }
            }
        }
        assert!(checked >= 25);
    }

    #[test]
    fn pose_values_ignore_expression_while_expr_map_changes() {
        let model = synth_model(5, 2, 2, 3);
        let beta = IdentityParams::zeros(2);
        let res = 48;
        let cam = front_camera(res);
        let a = model.evaluate_mesh(&beta, &ExpressionParams::zeros(3)).unwrap();
        let phi = ExpressionParams(vec![0.02, -0.01, 0.015]);
        let b = model.evaluate_mesh(&beta, &phi).unwrap();
        let fa = rasterize(&a.vertices, &a.triangles, &cam, res, res);
        let fb = rasterize(&b.vertices, &b.triangles, &cam, res, res);
        assert_eq!(fa.coverage(), fb.coverage());
        // template-coordinate texture: identical barycentric lookups give identical values
        let pa = make_pose_map(&a, &model, &cam, res, res).unwrap();
        let pb = make_pose_map(&b, &model, &cam, res, res).unwrap();
        let mut same_frag = 0;
        for p in 0..res * res {
            if let (Some(x), Some(y)) = (fa.fragments[p], fb.fragments[p]) {
                if x.triangle == y.triangle {
                    let d = (0..3).map(|k| (x.bary[k] - y.bary[k]).abs()).fold(0.0, f64::max);
                    for c in 0..42 {
                        assert!((pa.data[p * 42 + c] - pb.data[p * 42 + c]).abs() <= 64.0 * 4.0 * d + 1e-12);
                    }
                    same_frag += 1;
                }
            }
        }
        assert!(same_frag > 100);
        let ea = make_expression_map(&a, &model.neutral_expression_offsets(&beta, &ExpressionParams::zeros(3)).unwrap(), &cam, res, res).unwrap();
        let eb = make_expression_map(&b, &model.neutral_expression_offsets(&beta, &phi).unwrap(), &cam, res, res).unwrap();
        assert!(ea.data.iter().all(|v| *v == 0.0));
        assert!(eb.data.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn expression_map_is_local_to_a_single_moved_vertex() {
        let model = synth_model(6, 2, 1, 1);
        let mesh = model.template_mesh();
        let res = 64;
        let cam = front_camera(res);
        // pick the vertex nearest the front
        let (vi, v) = mesh.vertices.iter().enumerate().max_by(|a, b| a.1.z.total_cmp(&b.1.z)).unwrap();
        let mut offsets = vec![Vec3::zeros(); mesh.vertices.len()];
        offsets[vi] = Vec3::new(0.0, 0.0, 0.01);
        let map = make_expression_map(&mesh, &offsets, &cam, res, res).unwrap();
        // support lies within the projected one-ring of the vertex
        let ring: Vec<usize> = mesh.triangles.iter().filter(|t| t.contains(&(vi as u32))).flatten().map(|&i| i as usize).collect();
        let radius = ring.iter().map(|&j| {
            let a = cam.project(&mesh.vertices[j]).pixel;
            let b = cam.project(v).pixel;
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        }).fold(0.0, f64::max);
        let c = cam.project(v).pixel;
        let mut nonzero = 0;
        for row in 0..res {
            for col in 0..res {
                if map.pixel(row, col)[2] != 0.0 {
                    nonzero += 1;
                    let d = ((col as f64 + 0.5 - c[0]).powi(2) + (row as f64 + 0.5 - c[1]).powi(2)).sqrt();
                    assert!(d <= radius + 1e-9);
                }
            }
        }
        assert!(nonzero > 0);
    }

    #[test]
    fn view_map_center_and_norms() {
        let cam = Camera::new(50.0, 50.0, 16.0, 16.0, crate::math::Mat3::identity(), Vec3::zeros(), 32, 32).unwrap();
        let d = view_direction(&cam, &cam, cam.cx, cam.cy);
        assert_eq!(d, Vec3::new(0.0, 0.0, 1.0));
        let map = make_view_direction_map(&cam, &cam, 32, 32);
        for p in map.data.chunks(3) {
            assert!(((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn view_direction_follows_camera_rotation() {
        let first = Camera::new(50.0, 50.0, 16.0, 16.0, crate::math::Mat3::identity(), Vec3::zeros(), 32, 32).unwrap();
        for sign in [1.0, -1.0] {
            // world-to-camera rotation of a camera turned 90° about the first camera's y axis
            let r = rot_y(sign * std::f64::consts::FRAC_PI_2);
            let cam = Camera { rotation: r.transpose(), ..first.clone() };
            let d = view_direction(&cam, &first, cam.cx, cam.cy);
            assert!((d - Vec3::new(sign, 0.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn view_map_is_invariant_to_a_shared_world_rotation() {
        let mut rng = derive_rng(3, &[]);
        let a = front_camera(16);
        let b = Camera { rotation: rot_y(0.4) * a.rotation, ..a.clone() };
        for _ in 0..10 {
            let r = rot_from_axis_angle(&Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let t = Vec3::new(rng.random_range(-1.0..1.0), 0.0, 0.0);
            let m0 = make_view_direction_map(&b, &a, 16, 16);
            let m1 = make_view_direction_map(&b.after_world_transform(&r, &t), &a.after_world_transform(&r, &t), 16, 16);
            for (x, y) in m0.data.iter().zip(&m1.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropped_set_is_all_zero_but_keeps_source() {
        let model = synth_model(0, 0, 1, 1);
        let set = assemble_conditioning_set(&model, &IdentityParams::zeros(1), &ExpressionParams::zeros(1), &front_camera(64), &front_camera(64), true, 8).unwrap();
        let d = set.dropped();
        assert!(d.to_tensor().data.iter().all(|v| *v == 0.0));
        assert_eq!(d.source, set.source);
    }
}
