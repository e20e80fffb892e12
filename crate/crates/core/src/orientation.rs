//! Normal and area-weight initialisation, and the normal-update operator:
//! self-excluded gradient alignment against the current winding field.

use std::sync::Arc;

use nalgebra::{Matrix3, SymmetricEigen, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DiwrError, Result};
use crate::pcio::PointCloud;
use crate::shapes::random_unit;
use crate::spatial::KdTree;
use crate::winding::{DipoleField, SourceTree};
use crate::Vec3;

const MIN_GRADIENT: f64 = 1e-10;
const SIGN_PROBES: usize = 32;
const DISC_SIDES: usize = 96;

/// Normal-update schedule: `coarse_sweeps` full-replacement sweeps under a
/// wide kernel softening fix the global orientation, then up to `inner_iters`
/// blended sweeps under a spacing-scale softening refine it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrientationUpdateConfig {
    pub inner_iters: usize,
    pub eta: f64,
    /// Sweeps stop once the mean angular change (radians) drops below this.
    pub tolerance: f64,
    pub coarse_sweeps: usize,
    /// Coarse softening lengths as fractions of the cloud's extent,
    /// annealed geometrically from the first to the second.
    pub coarse_softening: f64,
    pub coarse_softening_end: f64,
    /// Fine softening length in units of the median nearest-neighbour spacing.
    pub fine_softening: f64,
}

impl Default for OrientationUpdateConfig {
    fn default() -> Self {
        OrientationUpdateConfig {
            inner_iters: 20,
            eta: 0.5,
            tolerance: 1e-3,
            coarse_sweeps: 40,
            coarse_softening: 0.3,
            coarse_softening_end: 0.02,
            fine_softening: 1.2,
        }
    }
}

impl OrientationUpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_iters < 1 {
            return Err(DiwrError::InvalidConfig("inner_iters must be >= 1".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(DiwrError::InvalidConfig("eta must lie in (0, 1]".into()));
        }
        if !(self.coarse_softening >= 0.0 && self.coarse_softening_end >= 0.0 && self.fine_softening >= 0.0) {
            return Err(DiwrError::InvalidConfig("softening must be non-negative".into()));
        }
        Ok(())
    }
}

/// Uniform random unit normals, deterministic per seed.
pub fn init_normals_random(cloud: &mut PointCloud, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals = (0..cloud.len()).map(|_| random_unit(&mut rng)).collect();
    cloud.set_normals(normals);
}

pub fn init_area_uniform(cloud: &PointCloud) -> Vec<f64> {
    vec![1.0; cloud.len()]
}

/// Area of the convex polygon `poly` (counter-clockwise).
fn polygon_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.x * b.y - a.y * b.x
        })
        .sum::<f64>()
}

/// Clips a convex polygon to the half-plane `x . dir <= offset`.
fn clip_half_plane(poly: &[Vector2<f64>], dir: &Vector2<f64>, offset: f64) -> Vec<Vector2<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let (da, db) = (a.dot(dir) - offset, b.dot(dir) - offset);
        if da <= 0.0 {
            out.push(a);
        }
        if (da < 0.0 && db > 0.0) || (da > 0.0 && db < 0.0) {
            let t = da / (da - db);
            out.push(a + (b - a) * t);
        }
    }
    out
}

/// Clipped Voronoi cell area of the origin among planar neighbours.
fn voronoi_cell_area(neighbours: &[Vector2<f64>]) -> f64 {
    let radius = neighbours.iter().map(|q| q.norm()).fold(0.0, f64::max);
    if radius <= 0.0 {
        return 0.0;
    }
    // Circumscribed polygon so the disc is fully contained.
    let outer = radius / (std::f64::consts::PI / DISC_SIDES as f64).cos();
    let mut poly: Vec<Vector2<f64>> = (0..DISC_SIDES)
        .map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / DISC_SIDES as f64;
            Vector2::new(t.cos(), t.sin()) * outer
        })
        .collect();
    for q in neighbours {
        let d2 = q.norm_squared();
        if d2 == 0.0 {
            continue;
        }
        poly = clip_half_plane(&poly, q, 0.5 * d2);
        if poly.len() < 3 {
            return 0.0;
        }
    }
    polygon_area(&poly)
}

/// Tangent basis of the PCA plane through the neighbourhood, or `None` when
/// the neighbourhood is (near) collinear.
fn pca_basis(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l1, l2) = (eig.eigenvalues[idx[1]], eig.eigenvalues[idx[2]]);
    if !(l2 > 0.0) || l1 <= 1e-12 * l2 {
        return None;
    }
    let u = eig.eigenvectors.column(idx[2]).into_owned();
    let v = eig.eigenvectors.column(idx[1]).into_owned();
    Some((u, v))
}

/// PCA normal of the `k`-neighbourhood of every point (unoriented).
pub fn pca_normals(cloud: &PointCloud, k: usize) -> Vec<Vec3> {
    let tree = KdTree::build(cloud.positions());
    let pts = cloud.positions();
    (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let mut nb: Vec<Vec3> = tree.knn(&pts[i], k, Some(i)).iter().map(|n| pts[n.index]).collect();
            nb.push(pts[i]);
            match pca_basis(&nb) {
                Some((u, v)) => u.cross(&v).normalize(),
                None => Vec3::z(),
            }
        })
        .collect()
}

/// Area weights from clipped 2-D Voronoi cells in the PCA plane of each
/// point's `k` nearest neighbours. Degenerate neighbourhoods fall back to the
/// mean of the defined weights.
pub fn init_area_voronoi(cloud: &PointCloud, k: usize) -> Result<Vec<f64>> {
    let n = cloud.len();
    if k < 3 || k >= n {
        return Err(DiwrError::InvalidConfig(format!("voronoi neighbour count {k} must lie in [3, {n})")));
    }
    let tree = KdTree::build(cloud.positions());
    let pts = cloud.positions();
    let areas: Vec<Option<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = pts[i];
            let nb: Vec<Vec3> = tree.knn(&p, k, Some(i)).iter().map(|n| pts[n.index]).collect();
            let mut all = nb.clone();
            all.push(p);
            let (u, v) = pca_basis(&all)?;
            let planar: Vec<Vector2<f64>> = nb.iter().map(|q| Vector2::new((q - p).dot(&u), (q - p).dot(&v))).collect();
            let a = voronoi_cell_area(&planar);
            (a > 0.0 && a.is_finite()).then_some(a)
        })
        .collect();
    let defined: Vec<f64> = areas.iter().flatten().copied().collect();
    let fallback = if defined.is_empty() {
        1.0 / n as f64
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(areas.into_iter().map(|a| a.unwrap_or(fallback)).collect())
}

/// `mean over masked points of (1 - n_old . n_new) / 2`.
pub fn normal_change(old: &[Vec3], new: &[Vec3], mask: &[bool]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((a, b), &m) in old.iter().zip(new).zip(mask) {
        if m {
            sum += 0.5 * (1.0 - a.dot(b));
            count += 1;
        }
    }
    if count == 0 {
        return Err(DiwrError::EmptyMask);
    }
    Ok(sum / count as f64)
}

fn moments(cloud: &PointCloud, normals: &[Vec3]) -> Vec<Vec3> {
    normals
        .iter()
        .zip(cloud.area_weights())
        .zip(cloud.confidences())
        .map(|((n, a), c)| n * (a * c))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalUpdateReport {
    pub sweeps: usize,
    /// Mean angular change of the last sweep, radians.
    pub last_change: f64,
    pub flipped: bool,
}

/// Median distance from a point to its nearest neighbour.
pub fn median_spacing(cloud: &PointCloud) -> f64 {
    if cloud.len() < 2 {
        return 0.0;
    }
    let tree = KdTree::build(cloud.positions());
    let mut d: Vec<f64> = (0..cloud.len())
        .into_par_iter()
        .map(|i| tree.knn(&cloud.positions()[i], 1, Some(i))[0].dist2.sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Diameter of the centroid-centred bounding ball (rotation invariant).
fn extent(points: &[Vec3]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    2.0 * points.iter().map(|p| (p - c).norm()).fold(0.0, f64::max)
}

/// One Jacobi sweep `n_i <- normalize((1 - eta) n_i - eta g_i/|g_i|)` with
/// `g_i` the self-excluded field gradient at `p_i` under softening `eps`.
/// Returns the mean angular change in radians.
fn sweep(cloud: &PointCloud, tree: &Arc<SourceTree>, beta: f64, eta: f64, eps: f64, normals: &mut Vec<Vec3>) -> f64 {
    let field = DipoleField::new(tree.clone(), &moments(cloud, normals), beta);
    let updated: Vec<(Vec3, f64)> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let n = normals[i];
            let g = field.gradient(&cloud.positions()[i], Some(i), eps);
            let gn = g.norm();
            if gn < MIN_GRADIENT {
                return (n, 0.0);
            }
            let blended = n * (1.0 - eta) - g * (eta / gn);
            let bn = blended.norm();
            if bn < MIN_GRADIENT {
                // Exactly opposed: take the field direction.
                return (-g / gn, std::f64::consts::PI);
            }
            let m = blended / bn;
            (m, n.dot(&m).clamp(-1.0, 1.0).acos())
        })
        .collect();
    let change = updated.iter().map(|u| u.1).sum::<f64>() / updated.len().max(1) as f64;
    *normals = updated.into_iter().map(|u| u.0).collect();
    change
}

fn geometric(start: f64, end: f64, k: usize, count: usize) -> f64 {
    if count <= 1 || start == end {
        return start;
    }
    let t = k as f64 / (count - 1) as f64;
    if start > 0.0 && end > 0.0 {
        start * (end / start).powf(t)
    } else {
        start + (end - start) * t
    }
}

/// Runs the coarse phase (only when `global`, i.e. for untrusted input
/// normals) and the fine phase, then the global sign check. `tree` must
/// partition the cloud's positions.
pub fn update_normals(
    cloud: &PointCloud,
    tree: &Arc<SourceTree>,
    beta: f64,
    cfg: &OrientationUpdateConfig,
    global: bool,
    probe_offset: f64,
) -> (Vec<Vec3>, NormalUpdateReport) {
    let mut normals = cloud.normals().to_vec();
    let side = extent(cloud.positions());
    let fine_eps = cfg.fine_softening * median_spacing(cloud);
    let mut sweeps = 0;
    let coarse = if global { cfg.coarse_sweeps } else { 0 };
    for k in 0..coarse {
        sweeps += 1;
        let eps = side * geometric(cfg.coarse_softening, cfg.coarse_softening_end, k, coarse);
        sweep(cloud, tree, beta, 1.0, eps, &mut normals);
    }
    let mut last_change = 0.0;
    for _ in 0..cfg.inner_iters {
        sweeps += 1;
        last_change = sweep(cloud, tree, beta, cfg.eta, fine_eps, &mut normals);
        if last_change < cfg.tolerance {
            break;
        }
    }
    let flipped = orient_globally(cloud, tree, beta, &mut normals, probe_offset);
    (
        normals,
        NormalUpdateReport {
            sweeps,
            last_change,
            flipped,
        },
    )
}

/// Flips every normal when the field is negative on the interior side, judged
/// on probes at `p_i -/+ offset n_i` around the most confident points.
/// Returns whether a flip happened.
pub fn orient_globally(
    cloud: &PointCloud,
    tree: &Arc<SourceTree>,
    beta: f64,
    normals: &mut [Vec3],
    offset: f64,
) -> bool {
    let n = cloud.len();
    if n == 0 {
        return false;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cloud.confidences()[b].total_cmp(&cloud.confidences()[a]).then(a.cmp(&b)));
    let top_c = cloud.confidences()[order[0]];
    let top: Vec<usize> = order.iter().copied().take_while(|&i| cloud.confidences()[i] >= top_c.min(0.9)).collect();
    let pool = if top.len() >= SIGN_PROBES { top } else { order };
    let stride = (pool.len() / SIGN_PROBES).max(1);
    let probes: Vec<usize> = pool.iter().copied().step_by(stride).take(SIGN_PROBES).collect();

    let field = DipoleField::new(tree.clone(), &moments(cloud, normals), beta);
    let mut votes: Vec<f64> = probes
        .iter()
        .map(|&i| {
            let p = cloud.positions()[i];
            let d = normals[i] * offset;
            // One side is interior (|w| ~ 1), the other exterior (w ~ 0); the
            // sum carries the sign of the interior value.
            field.potential(&(p - d), None) + field.potential(&(p + d), None)
        })
        .collect();
    votes.sort_by(f64::total_cmp);
    let median = votes[votes.len() / 2];
    if median < 0.0 {
        for nrm in normals.iter_mut() {
            *nrm = -*nrm;
        }
        true
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::{square_lattice, Shape};

    #[test]
    fn random_normals_are_unit_deterministic_and_unbiased() {
        let mut cloud = PointCloud::from_positions(vec![Vec3::zeros(); 100_000]);
        init_normals_random(&mut cloud, 42);
        assert!(cloud.normals().iter().all(|n| (n.norm() - 1.0).abs() < 1e-9));
        let mean = cloud.normals().iter().sum::<Vec3>() / 100_000.0;
        assert!(mean.amax() < 0.02, "{mean:?}");
        let mut again = PointCloud::from_positions(vec![Vec3::zeros(); 100_000]);
        init_normals_random(&mut again, 42);
        assert_eq!(cloud.normals(), again.normals());
    }

    #[test]
    fn uniform_area_is_ones() {
        let cloud = PointCloud::from_positions(vec![Vec3::zeros(); 5]);
        let a = init_area_uniform(&cloud);
        assert_eq!(a, vec![1.0; 5]);
        assert_eq!(a.iter().sum::<f64>(), 5.0);
    }

    #[test]
    fn lattice_interior_cell_is_h_squared() {
        let h = 0.013;
        let pts = square_lattice(11, 11, h);
        let cloud = PointCloud::from_positions(pts.clone());
        let a = init_area_voronoi(&cloud, 8).unwrap();
        let centre = 5 * 11 + 5;
        assert!((pts[centre] - Vec3::new(5.0 * h, 5.0 * h, 0.0)).norm() < 1e-12);
        assert!((a[centre] - h * h).abs() < 1e-6 * h * h, "{} vs {}", a[centre], h * h);
    }

    #[test]
    fn unit_square_corners_have_positive_cells() {
        let cloud = PointCloud::from_positions(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
        ]);
        let a = init_area_voronoi(&cloud, 3).unwrap();
        assert!(a.iter().all(|&x| x > 0.0), "{a:?}");
    }

    #[test]
    fn collinear_points_fall_back() {
        let mut pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        pts.extend(square_lattice(4, 4, 0.5).into_iter().map(|p| p + Vec3::new(20.0, 0.0, 0.0)));
        let cloud = PointCloud::from_positions(pts);
        let a = init_area_voronoi(&cloud, 4).unwrap();
        assert!(a.iter().all(|&x| x > 0.0 && x.is_finite()));
    }

    #[test]
    fn sphere_areas_sum_to_surface_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = Shape::unit_sphere().sample_cloud(20_000, &mut rng);
        let a = init_area_voronoi(&cloud, 12).unwrap();
        let total: f64 = a.iter().sum();
        let ratio = total / (4.0 * std::f64::consts::PI);
        assert!((0.9..=1.1).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn normal_change_examples() {
        let a = vec![Vec3::x(), Vec3::y()];
        let mask = vec![true, true];
        assert_eq!(normal_change(&a, &a, &mask).unwrap(), 0.0);
        let flipped: Vec<Vec3> = a.iter().map(|n| -n).collect();
        assert_eq!(normal_change(&a, &flipped, &mask).unwrap(), 1.0);
        let rotated = vec![Vec3::y(), Vec3::z()];
        assert_eq!(normal_change(&a, &rotated, &mask).unwrap(), 0.5);
        assert!(matches!(normal_change(&a, &a, &[false, false]), Err(DiwrError::EmptyMask)));
    }

    #[test]
    fn single_point_normal_unchanged() {
        let cloud = PointCloud::with_state(vec![Vec3::zeros()], vec![Vec3::x()], vec![1.0], vec![1.0]).unwrap();
        let tree = Arc::new(SourceTree::build(cloud.positions()));
        let (n, _) = update_normals(&cloud, &tree, 2.0, &OrientationUpdateConfig::default(), true, 0.06);
        assert!((n[0].abs() - Vec3::x()).norm() < 1e-15);
    }

    fn sphere_fixture(n: usize, seed: u64) -> (PointCloud, Arc<SourceTree>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cloud = Shape::unit_sphere().sample_cloud(n, &mut rng);
        init_normals_random(&mut cloud, seed + 1);
        let tree = Arc::new(SourceTree::build(cloud.positions()));
        (cloud, tree)
    }

    fn fraction_correct(cloud: &PointCloud, normals: &[Vec3]) -> f64 {
        let c = Vec3::zeros();
        cloud
            .positions()
            .iter()
            .zip(normals)
            .filter(|(p, n)| (*p - c).dot(n) > 0.0)
            .count() as f64
            / normals.len() as f64
    }

    #[test]
    fn sphere_orientation_from_random_normals() {
        let (cloud, tree) = sphere_fixture(20_000, 7);
        let cfg = OrientationUpdateConfig::default();
        let (normals, report) = update_normals(&cloud, &tree, 2.0, &cfg, true, 0.06);
        let frac = fraction_correct(&cloud, &normals);
        assert!(frac >= 0.99, "fraction {frac}, {report:?}");
        assert!(normals.iter().all(|n| (n.norm() - 1.0).abs() < 1e-9));
    }

    #[test]
    fn flipped_input_reaches_same_orientation() {
        let (cloud, tree) = sphere_fixture(3000, 8);
        let cfg = OrientationUpdateConfig::default();
        let (n1, _) = update_normals(&cloud, &tree, 2.0, &cfg, true, 0.06);
        let mut flipped = cloud.clone();
        for n in flipped.normals_mut() {
            *n = -*n;
        }
        let (n2, _) = update_normals(&flipped, &tree, 2.0, &cfg, true, 0.06);
        let agree = n1.iter().zip(&n2).filter(|(a, b)| a.dot(b) > 0.9).count() as f64 / n1.len() as f64;
        assert!(agree > 0.99, "agreement {agree}");
    }

    #[test]
    fn rotation_equivariance() {
        let (cloud, tree) = sphere_fixture(1000, 9);
        let cfg = OrientationUpdateConfig {
            inner_iters: 3,
            coarse_sweeps: 2,
            tolerance: 0.0,
            ..Default::default()
        };
        let (n1, _) = update_normals(&cloud, &tree, 0.0, &cfg, true, 0.06);
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.7, 1.1);
        let rotated = PointCloud::with_state(
            cloud.positions().iter().map(|p| rot * p).collect(),
            cloud.normals().iter().map(|n| rot * n).collect(),
            cloud.area_weights().to_vec(),
            cloud.confidences().to_vec(),
        )
        .unwrap();
        let tree_r = Arc::new(SourceTree::build(rotated.positions()));
        let (n2, _) = update_normals(&rotated, &tree_r, 0.0, &cfg, true, 0.06);
        for (a, b) in n1.iter().zip(&n2) {
            assert!((rot * a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn mean_error_decreases_over_first_sweeps() {
        let (mut cloud, tree) = sphere_fixture(4000, 10);
        let c = Vec3::zeros();
        let truth: Vec<Vec3> = cloud.positions().iter().map(|p| (p - c).normalize()).collect();
        // Start from a consistent but noisy orientation.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noisy: Vec<Vec3> = truth.iter().map(|t| (t + random_unit(&mut rng) * 0.8).normalize()).collect();
        cloud.set_normals(noisy);
        let err = |ns: &[Vec3]| ns.iter().zip(&truth).map(|(n, t)| n.dot(t).clamp(-1.0, 1.0).acos()).sum::<f64>() / ns.len() as f64;
        let one = OrientationUpdateConfig {
            inner_iters: 1,
            tolerance: 0.0,
            coarse_sweeps: 0,
            ..Default::default()
        };
        let mut last = err(cloud.normals());
        for _ in 0..5 {
            let (n, _) = update_normals(&cloud, &tree, 2.0, &one, false, 0.06);
            let e = err(&n);
            assert!(e < last, "{e} !< {last}");
            last = e;
            cloud.set_normals(n);
        }
    }
}
