//! Final surface extraction: confidence filtering, dense sampling of the
//! winding field and a watertight level-set mesh.
//!
//! Each grid cube is split into six tetrahedra sharing its main diagonal
//! (Kuhn decomposition). The split is conforming across neighbouring cubes,
//! so the piecewise-linear level set is a closed 2-manifold once the grid
//! boundary is pinned to the far-field value `w = 0`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DiwrError, Result};
use crate::pcio::{PointCloud, TriMesh};
use crate::spatial::KdTree;
use crate::winding::{kernel, WindingEvaluator, SINGULAR_DIST};
use crate::Vec3;

pub const MIN_RESOLUTION: usize = 32;

/// Cube corners are indexed by bits `x = 1, y = 2, z = 4`; every tetrahedron
/// walks from corner 0 to corner 7 along one permutation of the axes.
const KUHN_TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractOptions {
    /// Grid vertices per axis.
    pub resolution: usize,
    pub iso: f64,
    pub beta: f64,
    /// Vertices closer than this to a point are evaluated by direct summation.
    pub r_s: f64,
    pub box_margin: f64,
    pub keep_all_components: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            resolution: 128,
            iso: 0.5,
            beta: 2.0,
            r_s: 0.03,
            box_margin: 0.1,
            keep_all_components: false,
        }
    }
}

impl ExtractOptions {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < MIN_RESOLUTION {
            return Err(DiwrError::InvalidConfig(format!(
                "resolution must be at least {MIN_RESOLUTION}, got {}",
                self.resolution
            )));
        }
        if !self.iso.is_finite() || !(self.beta >= 0.0) || !(self.r_s >= 0.0) {
            return Err(DiwrError::InvalidConfig(
                "iso must be finite, beta and r_s non-negative".into(),
            ));
        }
        if !(self.box_margin >= 0.0 && self.box_margin.is_finite()) {
            return Err(DiwrError::InvalidConfig("box_margin must be >= 0".into()));
        }
        Ok(())
    }

    fn voxel(&self) -> f64 {
        (1.0 + 2.0 * self.box_margin) / (self.resolution - 1) as f64
    }

    pub fn voxel_diagonal(&self) -> f64 {
        self.voxel() * 3f64.sqrt()
    }
}

/// Points with `c_i >= tau_in` and their indices in the input cloud.
pub fn retain_high_confidence(cloud: &PointCloud, tau_in: f64) -> Result<(PointCloud, Vec<usize>)> {
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| cloud.confidences()[i] >= tau_in)
        .collect();
    if keep.is_empty() {
        return Err(DiwrError::EmptyResult);
    }
    Ok((cloud.subset(&keep), keep))
}

/// Scalar samples on a regular `n^3` vertex lattice, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub origin: Vec3,
    pub spacing: f64,
    pub n: usize,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    /// Samples `f` at every vertex of the lattice spanning `[lo, lo + (n-1)h]^3`.
    pub fn sample(origin: Vec3, spacing: f64, n: usize, f: impl Fn(&Vec3) -> f64 + Sync) -> Self {
        let values = (0..n * n * n)
            .into_par_iter()
            .map(|id| f(&vertex_position(origin, spacing, n, id)))
            .collect();
        ScalarGrid {
            origin,
            spacing,
            n,
            values,
        }
    }

    pub fn position(&self, id: usize) -> Vec3 {
        vertex_position(self.origin, self.spacing, self.n, id)
    }
}

fn vertex_position(origin: Vec3, h: f64, n: usize, id: usize) -> Vec3 {
    let (i, j, k) = (id % n, (id / n) % n, id / (n * n));
    origin + Vec3::new(i as f64, j as f64, k as f64) * h
}

/// Direct sum that skips sources coinciding with `q`.
fn eval_direct(cloud: &PointCloud, q: &Vec3) -> f64 {
    let mut w = 0.0;
    for i in 0..cloud.len() {
        let psi = cloud.area_weights()[i] * cloud.confidences()[i];
        let p = &cloud.positions()[i];
        if psi != 0.0 && (p - q).norm() >= SINGULAR_DIST {
            w += psi * kernel(p, &cloud.normals()[i], q);
        }
    }
    w
}

/// The winding field of `cloud` on the extraction lattice over the padded box.
pub fn sample_winding(cloud: &PointCloud, opts: &ExtractOptions) -> Result<ScalarGrid> {
    opts.validate()?;
    if cloud.is_empty() {
        return Err(DiwrError::EmptyInput);
    }
    let evaluator = WindingEvaluator::new(cloud, opts.beta);
    let kd = KdTree::build(cloud.positions());
    let origin = Vec3::repeat(-opts.box_margin);
    let r2 = opts.r_s * opts.r_s;
    Ok(ScalarGrid::sample(origin, opts.voxel(), opts.resolution, |q| {
        let near = opts.r_s > 0.0 && kd.nearest(q).is_some_and(|nb| nb.dist2 < r2);
        if near {
            eval_direct(cloud, q)
        } else {
            evaluator.eval(q)
        }
    }))
}

/// Level-set mesh of a scalar grid whose far-field value is 0.
///
/// The interior is the side of `iso` away from 0, so a field and its negation
/// extracted at `iso` and `-iso` give the same surface. Faces are oriented
/// from interior to exterior. Boundary lattice vertices are treated as
/// exterior, which closes any surface reaching the box.
pub fn marching_tetrahedra(grid: &ScalarGrid, iso: f64) -> Result<TriMesh> {
    let n = grid.n;
    if n < 2 || grid.values.len() != n * n * n {
        return Err(DiwrError::LengthMismatch(format!(
            "grid of side {n} holds {} values",
            grid.values.len()
        )));
    }
    let above = iso >= 0.0;
    let inside = |id: usize| -> bool {
        let (i, j, k) = (id % n, (id / n) % n, id / (n * n));
        if i == 0 || j == 0 || k == 0 || i == n - 1 || j == n - 1 || k == n - 1 {
            return false;
        }
        let v = grid.values[id];
        if above {
            v > iso
        } else {
            v < iso
        }
    };
    let value = |id: usize| -> f64 {
        let (i, j, k) = (id % n, (id / n) % n, id / (n * n));
        if i == 0 || j == 0 || k == 0 || i == n - 1 || j == n - 1 || k == n - 1 {
            0.0
        } else {
            grid.values[id]
        }
    };
    let flags: Vec<bool> = (0..n * n * n).into_par_iter().map(inside).collect();

    // Cells are processed per z-slab in parallel; each slab emits triangles as
    // lattice-edge keys, merged in slab order so the numbering is deterministic.
    let slabs: Vec<Vec<[(usize, usize); 3]>> = (0..n - 1)
        .into_par_iter()
        .map(|k| {
            let mut tris = Vec::new();
            let offsets: [usize; 8] = std::array::from_fn(|c| {
                (c & 1) + ((c >> 1) & 1) * n + ((c >> 2) & 1) * n * n
            });
            for j in 0..n - 1 {
                for i in 0..n - 1 {
                    let base = i + n * (j + n * k);
                    let corners = offsets.map(|o| base + o);
                    let mask = corners.iter().filter(|&&c| flags[c]).count();
                    if mask == 0 || mask == 8 {
                        continue;
                    }
                    for tet in &KUHN_TETS {
                        let ids = tet.map(|c| corners[c]);
                        polygonize_tet(&ids, &flags, grid, &mut tris);
                    }
                }
            }
            tris
        })
        .collect();

    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for slab in slabs {
        for tri in slab {
            let mut f = [0usize; 3];
            for (slot, &(a, b)) in tri.iter().enumerate() {
                f[slot] = *index.entry((a, b)).or_insert_with(|| {
                    vertices.push(edge_point(grid, a, b, value(a), value(b), iso));
                    vertices.len() - 1
                });
            }
            faces.push(f);
        }
    }
    if faces.is_empty() {
        return Err(DiwrError::EmptyLevelSet { iso });
    }
    Ok(TriMesh { vertices, faces })
}

fn edge_point(grid: &ScalarGrid, a: usize, b: usize, va: f64, vb: f64, iso: f64) -> Vec3 {
    let (pa, pb) = (grid.position(a), grid.position(b));
    let t = if vb != va {
        ((iso - va) / (vb - va)).clamp(0.0, 1.0)
    } else {
        0.5
    };
    pa + (pb - pa) * t
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Appends the level-set polygon of one tetrahedron, oriented from its
/// interior corners towards its exterior corners.
fn polygonize_tet(
    ids: &[usize; 4],
    flags: &[bool],
    grid: &ScalarGrid,
    out: &mut Vec<[(usize, usize); 3]>,
) {
    let (ins, outs): (Vec<usize>, Vec<usize>) = ids.iter().partition(|&&id| flags[id]);
    let centroid = |set: &[usize]| -> Vec3 {
        set.iter().map(|&id| grid.position(id)).sum::<Vec3>() / set.len() as f64
    };
    let polygon: Vec<(usize, usize)> = match (ins.len(), outs.len()) {
        (1, 3) => outs.iter().map(|&o| edge_key(ins[0], o)).collect(),
        (3, 1) => ins.iter().map(|&i| edge_key(i, outs[0])).collect(),
        (2, 2) => vec![
            edge_key(ins[0], outs[0]),
            edge_key(ins[0], outs[1]),
            edge_key(ins[1], outs[1]),
            edge_key(ins[1], outs[0]),
        ],
        _ => return,
    };
    // Orientation from the lattice geometry (edge midpoints), which is never
    // degenerate, rather than from interpolated positions.
    let mid = |&(a, b): &(usize, usize)| (grid.position(a) + grid.position(b)) * 0.5;
    let pts: Vec<Vec3> = polygon.iter().map(mid).collect();
    let mut normal = Vec3::zeros();
    for s in 0..pts.len() {
        normal += pts[s].cross(&pts[(s + 1) % pts.len()]);
    }
    let outward = centroid(&outs) - centroid(&ins);
    let mut polygon = polygon;
    if normal.dot(&outward) < 0.0 {
        polygon.reverse();
    }
    out.push([polygon[0], polygon[1], polygon[2]]);
    if polygon.len() == 4 {
        out.push([polygon[0], polygon[2], polygon[3]]);
    }
}

/// Closed mesh of the `opts.iso` level set of the field of `cloud`, the
/// largest component by face count unless all are requested.
pub fn extract_isosurface(cloud: &PointCloud, opts: &ExtractOptions) -> Result<TriMesh> {
    let grid = sample_winding(cloud, opts)?;
    let mesh = marching_tetrahedra(&grid, opts.iso)?;
    if opts.keep_all_components {
        return Ok(mesh);
    }
    let comps = mesh.connected_components();
    Ok(mesh.submesh(&comps[0]))
}
