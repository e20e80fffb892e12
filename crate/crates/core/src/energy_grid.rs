//! Sample set for the discrete Dirichlet energy: voxel centres of a uniform
//! grid over the padded unit cube, minus the exclusion band around
//! high-confidence points, with partial-volume weights near the band.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pcio::PointCloud;
use crate::spatial::KdTree;
use crate::winding::SourceTree;
use crate::Vec3;

/// Sub-voxel quadrature points per axis for the partial-volume weight.
const SUBDIV: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub resolution: usize,
    pub box_margin: f64,
    /// Exclusion radius.
    pub r_s: f64,
    /// Confidence threshold of the exclusion set.
    pub tau_in: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            resolution: 64,
            box_margin: 0.1,
            r_s: 0.03,
            tau_in: 0.9,
        }
    }
}

/// Cubic axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridBox {
    pub min: Vec3,
    pub side: f64,
}

impl GridBox {
    /// Unit cube expanded by `margin` on every side.
    pub fn padded_unit(margin: f64) -> Self {
        GridBox {
            min: Vec3::repeat(-margin),
            side: 1.0 + 2.0 * margin,
        }
    }

    pub fn max(&self) -> Vec3 {
        self.min + Vec3::repeat(self.side)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let hi = self.max();
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= hi[k])
    }

    /// Centre of voxel `(i, j, k)` for `res` voxels per axis.
    #[inline]
    pub fn voxel_center(&self, res: usize, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.side / res as f64;
        self.min + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * h
    }
}

#[derive(Debug, Clone)]
pub struct EnergyGrid {
    pub resolution: usize,
    pub bbox: GridBox,
    /// Retained sample positions.
    pub positions: Vec<Vec3>,
    /// Partial-volume weights, aligned with `positions`.
    pub weights: Vec<f64>,
    pub voxel_volume: f64,
    /// Indices of the points with `c_i >= tau_in` at construction.
    pub high_conf: Vec<usize>,
    pub params: GridParams,
    tree: Arc<SourceTree>,
}

/// Fraction of the cube `[c - h/2, c + h/2]^3` outside the ball, estimated on a
/// `SUBDIV^3` midpoint lattice.
fn uncovered_fraction(center: &Vec3, h: f64, ball: &Vec3, r: f64) -> f64 {
    let r2 = r * r;
    let step = h / SUBDIV as f64;
    let origin = center - Vec3::repeat(0.5 * h - 0.5 * step);
    let mut outside = 0usize;
    for a in 0..SUBDIV {
        for b in 0..SUBDIV {
            for c in 0..SUBDIV {
                let x = origin + Vec3::new(a as f64, b as f64, c as f64) * step;
                if (x - ball).norm_squared() > r2 {
                    outside += 1;
                }
            }
        }
    }
    outside as f64 / (SUBDIV * SUBDIV * SUBDIV) as f64
}

/// Squared distance from `p` to the cube of half-width `hw` around `center`.
fn cube_dist2(p: &Vec3, center: &Vec3, hw: f64) -> f64 {
    (0..3)
        .map(|k| {
            let d = ((p[k] - center[k]).abs() - hw).max(0.0);
            d * d
        })
        .sum()
}

/// Weight of the voxel at `center`: `None` when dropped, otherwise the
/// minimum over intersecting balls of the clamped uncovered fraction.
fn voxel_weight(center: &Vec3, h: f64, r_s: f64, index: Option<&KdTree>) -> Option<f64> {
    let Some(index) = index else {
        return Some(1.0);
    };
    if r_s <= 0.0 {
        return Some(1.0);
    }
    let hw = 0.5 * h;
    let reach = r_s + hw * 3f64.sqrt();
    let mut delta: f64 = 1.0;
    for nb in index.within(center, reach) {
        if nb.dist2 < r_s * r_s {
            return None;
        }
        let p = &index.points()[nb.index];
        if cube_dist2(p, center, hw) >= r_s * r_s {
            continue;
        }
        let f = uncovered_fraction(center, h, p, r_s).clamp(0.5, 1.0);
        delta = delta.min(f);
    }
    Some(delta)
}

/// Builds the sample set for the current high-confidence set.
pub fn build_grid(cloud: &PointCloud, params: &GridParams) -> EnergyGrid {
    let res = params.resolution.max(1);
    let bbox = GridBox::padded_unit(params.box_margin);
    let h = bbox.side / res as f64;
    let high_conf: Vec<usize> = (0..cloud.len())
        .filter(|&i| cloud.confidences()[i] >= params.tau_in)
        .collect();
    let centers: Vec<Vec3> = high_conf.iter().map(|&i| cloud.positions()[i]).collect();
    let index = (!centers.is_empty()).then(|| KdTree::build(&centers));

    let per_voxel: Vec<Option<(Vec3, f64)>> = (0..res * res * res)
        .into_par_iter()
        .map(|lin| {
            let (i, j, k) = (lin % res, (lin / res) % res, lin / (res * res));
            let q = bbox.voxel_center(res, i, j, k);
            voxel_weight(&q, h, params.r_s, index.as_ref()).map(|d| (q, d))
        })
        .collect();
    let (positions, weights): (Vec<Vec3>, Vec<f64>) = per_voxel.into_iter().flatten().unzip();
    let tree = Arc::new(SourceTree::build(&positions));
    EnergyGrid {
        resolution: res,
        bbox,
        positions,
        weights,
        voxel_volume: h * h * h,
        high_conf,
        params: *params,
        tree,
    }
}

impl EnergyGrid {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Partition of the sample positions, used for adjoint sums over samples.
    pub fn tree(&self) -> &Arc<SourceTree> {
        &self.tree
    }

    /// Boolean view of the high-confidence set for a cloud of `n` points.
    pub fn high_conf_mask(&self, n: usize) -> Vec<bool> {
        let mut mask = vec![false; n];
        for &i in &self.high_conf {
            mask[i] = true;
        }
        mask
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "x,y,z,delta")?;
        for (q, d) in self.positions.iter().zip(&self.weights) {
            writeln!(out, "{},{},{},{}", q.x, q.y, q.z, d)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud_with(points: Vec<Vec3>, c: Vec<f64>) -> PointCloud {
        let n = points.len();
        PointCloud::with_state(points, vec![Vec3::z(); n], vec![1.0; n], c).unwrap()
    }

    fn params(res: usize, r_s: f64) -> GridParams {
        GridParams {
            resolution: res,
            box_margin: 0.1,
            r_s,
            tau_in: 0.9,
        }
    }

    #[test]
    fn no_high_confidence_keeps_full_grid() {
        let cloud = cloud_with(vec![Vec3::repeat(0.5), Vec3::repeat(0.2)], vec![0.5, 0.1]);
        let g = build_grid(&cloud, &params(8, 0.2));
        assert_eq!(g.len(), 512);
        assert!(g.weights.iter().all(|&d| d == 1.0));
        assert!(g.high_conf.is_empty());
        assert!((g.voxel_volume - (1.2f64 / 8.0).powi(3)).abs() < 1e-15);
    }

    #[test]
    fn voxel_with_centered_point_is_dropped() {
        let b = GridBox::padded_unit(0.1);
        let q = b.voxel_center(8, 3, 4, 5);
        let h = 1.2 / 8.0;
        let cloud = cloud_with(vec![q], vec![1.0]);
        let g = build_grid(&cloud, &params(8, h * 1.8));
        assert!(g.positions.iter().all(|p| (p - q).norm() > 1e-12));
        assert!(g.len() < 512);
        for p in &g.positions {
            assert!((p - q).norm() >= h * 1.8);
        }
    }

    #[test]
    fn half_covered_voxel_weight_matches_monte_carlo() {
        let h = 0.1;
        let center = Vec3::new(0.45, 0.45, 0.45);
        // Large ball whose surface passes just beyond the voxel centre.
        let r = 10.0;
        let ball = center + Vec3::new(r + 1e-3, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let mut outside = 0usize;
        for _ in 0..n {
            let x = center
                + Vec3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ) * h;
            if (x - ball).norm_squared() > r * r {
                outside += 1;
            }
        }
        let oracle = (outside as f64 / n as f64).clamp(0.5, 1.0);
        let est = uncovered_fraction(&center, h, &ball, r).clamp(0.5, 1.0);
        assert!((oracle - 0.5).abs() < 0.05, "oracle {oracle}");
        assert!((est - oracle).abs() < 0.05, "{est} vs {oracle}");
    }

    #[test]
    fn weights_in_range_and_band_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let c: Vec<f64> = (0..300)
            .map(|i| if i % 3 == 0 { 0.5 } else { 1.0 })
            .collect();
        let cloud = cloud_with(pts.clone(), c.clone());
        let g = build_grid(&cloud, &params(16, 0.04));
        assert!(g.weights.iter().all(|&d| (0.5..=1.0).contains(&d)));
        for q in &g.positions {
            for (p, &ci) in pts.iter().zip(&c) {
                if ci >= 0.9 {
                    assert!((q - p).norm() >= 0.04);
                }
            }
        }
        assert_eq!(g.high_conf.len(), 200);
    }

    #[test]
    fn zero_radius_and_threshold_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let c: Vec<f64> = (0..200).map(|_| rng.random()).collect();
        let cloud = cloud_with(pts, c);
        let g0 = build_grid(&cloud, &params(12, 0.0));
        assert_eq!(g0.len(), 12 * 12 * 12);
        assert!(g0.weights.iter().all(|&d| d == 1.0));
        let mut counts = vec![];
        for tau in [0.2, 0.5, 0.8, 1.0] {
            let mut p = params(12, 0.08);
            p.tau_in = tau;
            counts.push(build_grid(&cloud, &p).len());
        }
        assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    }

    #[test]
    fn deterministic_and_csv() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<Vec3> = (0..100)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let cloud = cloud_with(pts, vec![1.0; 100]);
        let a = build_grid(&cloud, &params(10, 0.05));
        let b = build_grid(&cloud, &params(10, 0.05));
        assert_eq!(a.positions, b.positions);
        assert_eq!(a.weights, b.weights);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        a.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), a.len() + 1);
        assert!(text.starts_with("x,y,z,delta"));
    }
}
