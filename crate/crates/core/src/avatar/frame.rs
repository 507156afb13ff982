//! Local frames attached to mesh triangles.

use super::AvatarError;
use crate::math::{normalize_backward, Mat3, Vec3};
use crate::morphable_model::Mesh;

/// Columns of `rotation` are (ê₁, n̂, ê₁ × n̂): the normalized first edge, the face
/// normal, and their cross product, which makes the frame right-handed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleFrame {
    pub origin: Vec3,
    pub rotation: Mat3,
    /// Mean edge length.
    pub scale: f64,
}

/// Upstream gradients with respect to a frame's components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameGrad {
    pub origin: Vec3,
    pub rotation: Mat3,
    pub scale: f64,
}

impl Default for FrameGrad {
    fn default() -> Self {
        Self { origin: Vec3::zeros(), rotation: Mat3::zeros(), scale: 0.0 }
    }
}

impl FrameGrad {
    pub fn add(&mut self, o: &FrameGrad) {
        self.origin += o.origin;
        self.rotation += o.rotation;
        self.scale += o.scale;
    }
}

pub fn frame_from_vertices(a: &Vec3, b: &Vec3, c: &Vec3) -> Option<TriangleFrame> {
    let e1 = b - a;
    let e2 = c - a;
    let n = e1.cross(&e2);
    let (l1, ln) = (e1.norm(), n.norm());
    if !(l1 > 0.0 && ln > 0.0) {
        return None;
    }
    let x = e1 / l1;
    let y = n / ln;
    let rotation = Mat3::from_columns(&[x, y, x.cross(&y)]);
    let scale = (l1 + (c - b).norm() + e2.norm()) / 3.0;
    Some(TriangleFrame { origin: (a + b + c) / 3.0, rotation, scale })
}

pub fn triangle_frame(mesh: &Mesh, i: usize) -> Result<TriangleFrame, AvatarError> {
    let [a, b, c] = mesh.triangle_vertices(i);
    frame_from_vertices(&a, &b, &c).ok_or(AvatarError::DegenerateTriangle(i))
}

/// Frames for every triangle; degenerate triangles get `None`.
pub fn all_frames(vertices: &[Vec3], triangles: &[[u32; 3]]) -> Vec<Option<TriangleFrame>> {
    triangles
        .iter()
        .map(|t| frame_from_vertices(&vertices[t[0] as usize], &vertices[t[1] as usize], &vertices[t[2] as usize]))
        .collect()
}

/// Gradients of the three vertices given gradients of the frame.
pub fn frame_backward(a: &Vec3, b: &Vec3, c: &Vec3, g: &FrameGrad) -> [Vec3; 3] {
    let e1 = b - a;
    let e2 = c - a;
    let e3 = c - b;
    let n = e1.cross(&e2);
    let x = e1.normalize();
    let y = n.normalize();
    let (g1, g2, g3) = (g.rotation.column(0).into_owned(), g.rotation.column(1).into_owned(), g.rotation.column(2).into_owned());
    // third column z = x × y
    let gx = g1 + y.cross(&g3);
    let gy = g2 + g3.cross(&x);
    let mut ge1 = normalize_backward(&e1, &gx);
    let gn = normalize_backward(&n, &gy);
    ge1 += e2.cross(&gn);
    let mut ge2 = gn.cross(&e1);
    // scale = (|e1| + |e3| + |e2|) / 3
    let s = g.scale / 3.0;
    ge1 += e1 / e1.norm() * s;
    ge2 += e2 / e2.norm() * s;
    let ge3 = e3 / e3.norm() * s;
    let go = g.origin / 3.0;
    [go - ge1 - ge2, go + ge1 - ge3, go + ge2 + ge3]
}
