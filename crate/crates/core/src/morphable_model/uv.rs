//! Remeshing onto a UV-pixel-aligned grid.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Mesh, ModelError, MorphableModel};
use crate::math::Vec3;

pub const DEFAULT_UV_RESOLUTION: usize = 128;

/// Location of a grid vertex on the source mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaryRef {
    pub triangle: u32,
    pub weights: [f64; 3],
}

/// A mesh with one vertex per UV pixel center, indexed `v_row * resolution + u_col`.
#[derive(Debug, Clone, PartialEq)]
pub struct UvMesh {
    pub resolution: usize,
    pub refs: Vec<Option<BaryRef>>,
    /// Positions for the parameters the mesh was last evaluated at; zero for invalid pixels.
    pub vertices: Vec<Vec3>,
    pub triangles: Arc<Vec<[u32; 3]>>,
    /// Triangles of the source model the references point into.
    pub source_triangles: Arc<Vec<[u32; 3]>>,
    /// True where the source region is excluded from corrective deformation.
    pub static_mask: Vec<bool>,
}

#[inline]
fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Barycentric weights of `p` in `(a, b, c)` if `p` lies inside or on the boundary.
fn locate(a: [f64; 2], b: [f64; 2], c: [f64; 2], p: [f64; 2]) -> Option<[f64; 3]> {
    let area = orient(a, b, c);
    if area == 0.0 {
        return None;
    }
    let w0 = orient(b, c, p) / area;
    let w1 = orient(c, a, p) / area;
    let w2 = orient(a, b, p) / area;
    if w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0 {
        Some([w0, w1, w2])
    } else {
        None
    }
}

/// Buckets triangles by the UV pixels their bounding boxes touch.
fn bin_triangles(uv: &[[f64; 2]], triangles: &[[u32; 3]], res: usize) -> Vec<Vec<u32>> {
    let mut bins = vec![Vec::new(); res * res];
    let to_cell = |x: f64| ((x * res as f64).floor().max(0.0) as usize).min(res - 1);
    for (t, tri) in triangles.iter().enumerate() {
        let pts = tri.map(|i| uv[i as usize]);
        let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in pts {
            u0 = u0.min(p[0]);
            u1 = u1.max(p[0]);
            v0 = v0.min(p[1]);
            v1 = v1.max(p[1]);
        }
        for row in to_cell(v0)..=to_cell(v1) {
            for col in to_cell(u0)..=to_cell(u1) {
                bins[row * res + col].push(t as u32);
            }
        }
    }
    bins
}

/// Builds the grid remesh. Each pixel center is assigned to the lowest-indexed
/// source triangle that contains it (boundary inclusive).
pub fn remesh_to_uv(model: &MorphableModel, resolution: usize) -> Result<UvMesh, ModelError> {
    let uv = model.uv_coords.as_ref().ok_or(ModelError::MissingUvAtlas)?;
    if resolution == 0 {
        return Err(ModelError::Invalid("uv resolution must be positive".into()));
    }
    let res = resolution;
    let bins = bin_triangles(uv, &model.triangles, res);
    let mut refs = vec![None; res * res];
    for row in 0..res {
        for col in 0..res {
            let p = [(col as f64 + 0.5) / res as f64, (row as f64 + 0.5) / res as f64];
            // bins are filled in triangle order, so the first hit is the lowest index
            for &t in &bins[row * res + col] {
                let tri = model.triangles[t as usize];
                let [a, b, c] = tri.map(|i| uv[i as usize]);
                if let Some(weights) = locate(a, b, c, p) {
                    refs[row * res + col] = Some(BaryRef { triangle: t, weights });
                    break;
                }
            }
        }
    }

    // Orient grid triangles like the source triangles are oriented in UV space.
    let positive = model
        .triangles
        .iter()
        .map(|tri| {
            let [a, b, c] = tri.map(|i| uv[i as usize]);
            orient(a, b, c)
        })
        .filter(|a| *a > 0.0)
        .count();
    let flip = positive * 2 < model.triangles.len();

    let mut triangles = Vec::new();
    for row in 0..res.saturating_sub(1) {
        for col in 0..res - 1 {
            let a = row * res + col;
            let b = a + 1;
            let c = a + res;
            let d = c + 1;
            if [a, b, c, d].iter().any(|&i| refs[i].is_none()) {
                continue;
            }
            let (a, b, c, d) = (a as u32, b as u32, c as u32, d as u32);
            if flip {
                triangles.push([a, d, b]);
                triangles.push([a, c, d]);
            } else {
                triangles.push([a, b, d]);
                triangles.push([a, d, c]);
            }
        }
    }

    let static_mask = refs
        .iter()
        .map(|r| match r {
            None => true,
            Some(r) => {
                let tri = model.triangles[r.triangle as usize];
                let k = (0..3)
                    .max_by(|&i, &j| r.weights[i].total_cmp(&r.weights[j]).then(j.cmp(&i)))
                    .unwrap();
                model.static_mask[tri[k] as usize]
            }
        })
        .collect();

    let mut mesh = UvMesh {
        resolution: res,
        refs,
        vertices: vec![Vec3::zeros(); res * res],
        triangles: Arc::new(triangles),
        source_triangles: model.triangles.clone(),
        static_mask,
    };
    mesh.vertices = mesh.interpolate(&model.template);
    Ok(mesh)
}

impl UvMesh {
    pub fn num_valid(&self) -> usize {
        self.refs.iter().filter(|r| r.is_some()).count()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.refs[i].is_some()
    }

    /// Barycentric blend of per-source-vertex values; zero at invalid pixels.
    pub fn interpolate(&self, values: &[Vec3]) -> Vec<Vec3> {
        self.refs
            .iter()
            .map(|r| match r {
                None => Vec3::zeros(),
                Some(r) => {
                    let tri = self.source_triangles[r.triangle as usize].map(|i| i as usize);
                    values[tri[0]] * r.weights[0] + values[tri[1]] * r.weights[1] + values[tri[2]] * r.weights[2]
                }
            })
            .collect()
    }

    /// Re-evaluates the grid positions for a newly evaluated source mesh.
    pub fn evaluate(&self, source: &Mesh) -> UvMesh {
        let mut out = self.clone();
        out.vertices = self.interpolate(&source.vertices);
        out
    }

    pub fn as_mesh(&self) -> Mesh {
        Mesh::new(self.vertices.clone(), self.triangles.clone())
    }
}

/// Pairwise overlap check for the UV layout. Triangles that only share boundary
/// points are allowed; interiors must be disjoint.
pub(crate) fn check_non_overlapping(uv: &[[f64; 2]], triangles: &[[u32; 3]]) -> Result<(), String> {
    const GRID: usize = 64;
    let bins = bin_triangles(uv, triangles, GRID);
    let mut seen = std::collections::HashSet::new();
    for bin in &bins {
        for (i, &a) in bin.iter().enumerate() {
            for &b in &bin[i + 1..] {
                if !seen.insert((a, b)) {
                    continue;
                }
                let ta = triangles[a as usize].map(|k| uv[k as usize]);
                let tb = triangles[b as usize].map(|k| uv[k as usize]);
                if interiors_overlap(&ta, &tb) {
                    return Err(format!("uv triangles {a} and {b} overlap"));
                }
            }
        }
    }
    Ok(())
}

/// Separating-axis test with a small tolerance so shared edges do not count.
fn interiors_overlap(a: &[[f64; 2]; 3], b: &[[f64; 2]; 3]) -> bool {
    const EPS: f64 = 1e-12;
    for tri in [a, b] {
        for e in 0..3 {
            let p = tri[e];
            let q = tri[(e + 1) % 3];
            let axis = [-(q[1] - p[1]), q[0] - p[0]];
            let proj = |t: &[[f64; 2]; 3]| {
                let vals = t.map(|v| v[0] * axis[0] + v[1] * axis[1]);
                (vals.iter().cloned().fold(f64::INFINITY, f64::min), vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            };
            let (amin, amax) = proj(a);
            let (bmin, bmax) = proj(b);
            let scale = axis[0].abs() + axis[1].abs();
            if amax <= bmin + EPS * scale || bmax <= amin + EPS * scale {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable_model::{synth_model, ExpressionParams, IdentityParams};
    use nalgebra::{Matrix2, Vector2};

    /// Independent point location: solve the 2×2 barycentric system per triangle.
    fn oracle_position(model: &MorphableModel, p: [f64; 2], positions: &[Vec3]) -> Option<Vec3> {
        let uv = model.uv_coords.as_ref().unwrap();
        for tri in model.triangles.iter() {
            let [a, b, c] = tri.map(|i| Vector2::new(uv[i as usize][0], uv[i as usize][1]));
            let m = Matrix2::from_columns(&[b - a, c - a]);
            let Some(inv) = m.try_inverse() else { continue };
            let l = inv * (Vector2::new(p[0], p[1]) - a);
            let (l1, l2) = (l.x, l.y);
            let l0 = 1.0 - l1 - l2;
            let tol = -1e-12;
            if l0 >= tol && l1 >= tol && l2 >= tol {
                let [i, j, k] = tri.map(|i| i as usize);
                return Some(positions[i] * l0 + positions[j] * l1 + positions[k] * l2);
            }
        }
        None
    }

    #[test]
    fn resolution_bounds_candidate_count() {
        let m = synth_model(0, 1, 2, 2);
        let uvm = remesh_to_uv(&m, DEFAULT_UV_RESOLUTION).unwrap();
        assert_eq!(uvm.refs.len(), 128 * 128);
        assert!(uvm.num_valid() <= 16384);
    }

    #[test]
    fn single_covering_triangle_with_constant_positions() {
        let c = Vec3::new(0.1, -0.2, 0.3);
        // one triangle covering the whole unit square
        let template = vec![c, c + Vec3::new(1e-3, 0.0, 0.0), c + Vec3::new(0.0, 1e-3, 0.0)];
        let uv = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let mut model =
            MorphableModel::new(template, vec![[0, 1, 2]], vec![], 0, vec![], 0, Some(uv), vec![false; 3]).unwrap();
        model.uv_coords = Some(vec![[-0.01, -0.01], [2.5, -0.01], [-0.01, 2.5]]);
        let uvm = remesh_to_uv(&model, 8).unwrap();
        assert_eq!(uvm.num_valid(), 64);
        let constant = vec![c; 3];
        for v in uvm.interpolate(&constant) {
            assert!((v - c).norm() < 1e-15);
        }
    }

    #[test]
    fn positions_match_point_location_oracle() {
        let m = synth_model(4, 1, 3, 3);
        let res = 24;
        let uvm = remesh_to_uv(&m, res).unwrap();
        for row in 0..res {
            for col in 0..res {
                let p = [(col as f64 + 0.5) / res as f64, (row as f64 + 0.5) / res as f64];
                let oracle = oracle_position(&m, p, &m.template);
                let i = row * res + col;
                match oracle {
                    None => assert!(!uvm.is_valid(i)),
                    Some(o) => {
                        assert!(uvm.is_valid(i));
                        assert!((uvm.vertices[i] - o).norm() <= 1e-12 * o.norm().max(1e-3), "{row},{col}");
                    }
                }
            }
        }
        // the sinusoidal atlas covers 2/π of the square
        let frac = uvm.num_valid() as f64 / (res * res) as f64;
        assert!((frac - 2.0 / std::f64::consts::PI).abs() < 0.05, "{frac}");
    }

    #[test]
    fn remeshing_commutes_with_blendshape_evaluation() {
        let m = synth_model(6, 1, 4, 5);
        let uvm = remesh_to_uv(&m, 20).unwrap();
        let beta = IdentityParams(vec![0.3, -1.0, 0.5, 0.2]);
        let phi = ExpressionParams(vec![1.0, -0.4, 0.7, 0.0, 2.0]);
        let src = m.evaluate_mesh(&beta, &phi).unwrap();
        let re = uvm.evaluate(&src);
        for (i, r) in uvm.refs.iter().enumerate() {
            let Some(r) = r else { continue };
            let tri = m.triangles[r.triangle as usize];
            let expect: Vec3 = (0..3).map(|k| src.vertices[tri[k] as usize] * r.weights[k]).sum();
            assert!((re.vertices[i] - expect).norm() <= 1e-12 * expect.norm());
        }
    }

    #[test]
    fn ties_go_to_lowest_triangle() {
        // two triangles sharing the diagonal; pixel centers on the diagonal tie
        let template = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let uv = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let model = MorphableModel::new(
            template,
            vec![[0, 1, 2], [0, 2, 3]],
            vec![],
            0,
            vec![],
            0,
            Some(uv),
            vec![false; 4],
        )
        .unwrap();
        let uvm = remesh_to_uv(&model, 4).unwrap();
        for k in 0..4 {
            assert_eq!(uvm.refs[k * 4 + k].unwrap().triangle, 0);
        }
        assert_eq!(uvm.refs[3 * 4].unwrap().triangle, 1);
    }

    #[test]
    fn missing_atlas_is_unsupported() {
        let m = crate::morphable_model::test_models::icosahedron(0, 1, 1);
        assert_eq!(remesh_to_uv(&m, 8).unwrap_err(), ModelError::MissingUvAtlas);
    }

    #[test]
    fn overlapping_layout_is_rejected() {
        let uv = vec![[0.0, 0.0], [0.5, 0.0], [0.0, 0.5], [0.1, 0.1], [0.6, 0.1], [0.1, 0.6]];
        assert!(check_non_overlapping(&uv, &[[0, 1, 2], [3, 4, 5]]).is_err());
        let uv = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(check_non_overlapping(&uv, &[[0, 1, 2], [0, 2, 3]]).is_ok());
    }

    #[test]
    fn grid_triangles_skip_invalid_cells() {
        let m = synth_model(2, 0, 1, 1);
        let mut cut = m.clone();
        // shrink the atlas to the lower half so the upper rows are uncovered
        cut.uv_coords = Some(m.uv_coords.as_ref().unwrap().iter().map(|p| [p[0], p[1] * 0.5]).collect());
        let uvm = remesh_to_uv(&cut, 16).unwrap();
        for tri in uvm.triangles.iter() {
            assert!(tri.iter().all(|&i| uvm.is_valid(i as usize)));
        }
        assert!(uvm.num_valid() < 16 * 16);
        assert!(!uvm.triangles.is_empty());
    }
}
