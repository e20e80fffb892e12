//! Evaluation metrics (Chamfer distance, normal consistency, orientation
//! error) and the point-cloud quality measures used to pick a parameter
//! regime.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DiwrError, Result};
use crate::pcio::{PointCloud, TriMesh};
use crate::spatial::KdTree;
use crate::Vec3;

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_TRIM: f64 = 10.0;
pub const DEFAULT_SAMPLES: usize = 100_000;

/// Thresholds below which an input counts as easy/moderate.
pub const EASY_SIGMA: f64 = 0.002;
pub const EASY_U: f64 = 0.3;
pub const EASY_O: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    /// Median of the per-point mean kNN distance.
    pub s_hat: f64,
    /// Median RMS plane-fit residual of the kNN neighbourhoods.
    pub sigma_hat: f64,
    /// Trimmed coefficient of variation of the spacings.
    pub u_hat: f64,
    /// Fraction of points with unusually sparse neighbourhoods.
    pub o_hat: f64,
    pub k: usize,
    pub trim_tau: f64,
}

impl QualityReport {
    pub fn is_easy(&self) -> bool {
        self.sigma_hat <= EASY_SIGMA && self.u_hat <= EASY_U && self.o_hat <= EASY_O
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// RMS distance of `points` to their least-squares plane.
fn plane_residual(points: &[Vec3]) -> f64 {
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let smallest = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min).max(0.0);
    (smallest / points.len() as f64).sqrt()
}

/// Spacing, noise, non-uniformity and outlier measures over the `k` nearest
/// neighbours of every point (the point itself excluded). `trim_tau` is the
/// percentage discarded at each end before the coefficient of variation.
pub fn quality_measures(cloud: &PointCloud, k: usize, trim_tau: f64) -> Result<QualityReport> {
    let n = cloud.len();
    if n <= k {
        return Err(DiwrError::TooFewPoints { got: n, need: k + 1 });
    }
    if k == 0 || !(0.0..50.0).contains(&trim_tau) {
        return Err(DiwrError::InvalidConfig(format!("k = {k}, trim = {trim_tau}")));
    }
    let pts = cloud.positions();
    let tree = KdTree::build(pts);
    let per_point: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nb = tree.knn(&pts[i], k, Some(i));
            let s = nb.iter().map(|x| x.dist2.sqrt()).sum::<f64>() / nb.len() as f64;
            let nbp: Vec<Vec3> = nb.iter().map(|x| pts[x.index]).collect();
            (s, plane_residual(&nbp))
        })
        .collect();
    let s: Vec<f64> = per_point.iter().map(|v| v.0).collect();
    let sigma: Vec<f64> = per_point.iter().map(|v| v.1).collect();
    Ok(aggregate_measures(s, sigma, k, trim_tau))
}

/// Summary statistics from per-point spacings and plane-fit residuals.
pub fn aggregate_measures(mut s: Vec<f64>, mut sigma: Vec<f64>, k: usize, trim_tau: f64) -> QualityReport {
    let n = s.len();
    let (mu_s, sd_s) = mean_std(&s);
    // Relative slack keeps rounding noise in equal spacings from counting.
    let cutoff = mu_s + 2.0 * sd_s + 1e-12 * mu_s.abs();
    let o_hat = s.iter().filter(|&&v| v > cutoff).count() as f64 / n as f64;
    let sigma_hat = median(&mut sigma);
    let s_hat = median(&mut s);
    // `s` is sorted now.
    let cut = (n as f64 * trim_tau / 100.0).floor() as usize;
    let (mt, st) = mean_std(&s[cut..n - cut]);
    let u_hat = if mt > 0.0 { st / mt } else { 0.0 };
    QualityReport {
        s_hat,
        sigma_hat,
        u_hat,
        o_hat,
        k,
        trim_tau,
    }
}

/// Area-uniform samples on a mesh with their face normals.
pub fn sample_mesh<R: Rng + ?Sized>(mesh: &TriMesh, count: usize, rng: &mut R) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let areas: Vec<f64> = mesh.faces.iter().map(|f| mesh.face_area(f)).collect();
    let total: f64 = areas.iter().sum();
    if mesh.faces.is_empty() || !(total > 0.0) || count == 0 {
        return Err(DiwrError::EmptyInput);
    }
    let mut cdf = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a / total;
        cdf.push(acc);
    }
    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.random();
        let fi = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
        let f = &mesh.faces[fi];
        let (a, b, c) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        let (mut r1, mut r2): (f64, f64) = (rng.random(), rng.random());
        if r1 + r2 > 1.0 {
            r1 = 1.0 - r1;
            r2 = 1.0 - r2;
        }
        points.push(a + (b - a) * r1 + (c - a) * r2);
        normals.push(mesh.face_normal(f));
    }
    Ok((points, normals))
}

fn mean_nearest(from: &[Vec3], tree: &KdTree) -> f64 {
    from.par_iter()
        .map(|p| tree.nearest(p).map(|n| n.dist2.sqrt()).unwrap_or(0.0))
        .sum::<f64>()
        / from.len() as f64
}

/// Symmetric mean nearest-neighbour distance (unsquared L2).
pub fn chamfer_points(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(DiwrError::EmptyInput);
    }
    let (ta, tb) = (KdTree::build(a), KdTree::build(b));
    Ok(0.5 * (mean_nearest(a, &tb) + mean_nearest(b, &ta)))
}

pub fn chamfer_meshes<R: Rng + ?Sized>(a: &TriMesh, b: &TriMesh, samples: usize, rng: &mut R) -> Result<f64> {
    let (pa, _) = sample_mesh(a, samples, rng)?;
    let (pb, _) = sample_mesh(b, samples, rng)?;
    chamfer_points(&pa, &pb)
}

fn mean_abs_cos(from: &[Vec3], from_n: &[Vec3], tree: &KdTree, to_n: &[Vec3]) -> f64 {
    from.par_iter()
        .zip(from_n)
        .map(|(p, n)| {
            let j = tree.nearest(p).expect("non-empty").index;
            n.dot(&to_n[j]).abs()
        })
        .sum::<f64>()
        / from.len() as f64
}

/// Symmetric mean `|cos|` between each sample's normal and the normal of its
/// nearest sample on the other surface.
pub fn normal_consistency_points(pa: &[Vec3], na: &[Vec3], pb: &[Vec3], nb: &[Vec3]) -> Result<f64> {
    if pa.is_empty() || pb.is_empty() {
        return Err(DiwrError::EmptyInput);
    }
    if pa.len() != na.len() || pb.len() != nb.len() {
        return Err(DiwrError::LengthMismatch("points and normals".into()));
    }
    let (ta, tb) = (KdTree::build(pa), KdTree::build(pb));
    Ok(0.5 * (mean_abs_cos(pa, na, &tb, nb) + mean_abs_cos(pb, nb, &ta, na)))
}

pub fn normal_consistency<R: Rng + ?Sized>(a: &TriMesh, b: &TriMesh, samples: usize, rng: &mut R) -> Result<f64> {
    let (pa, na) = sample_mesh(a, samples, rng)?;
    let (pb, nb) = sample_mesh(b, samples, rng)?;
    normal_consistency_points(&pa, &na, &pb, &nb)
}

/// Mean angular error in degrees and the fraction of flipped normals.
pub fn orientation_error(normals: &[Vec3], truth: &[Vec3]) -> Result<(f64, f64)> {
    if normals.len() != truth.len() {
        return Err(DiwrError::LengthMismatch(format!("{} normals vs {} references", normals.len(), truth.len())));
    }
    if normals.is_empty() {
        return Err(DiwrError::EmptyInput);
    }
    let n = normals.len() as f64;
    let angle: f64 = normals
        .iter()
        .zip(truth)
        .map(|(a, b)| a.dot(b).clamp(-1.0, 1.0).acos().to_degrees())
        .sum();
    let flips = normals.iter().zip(truth).filter(|(a, b)| a.dot(b) < 0.0).count() as f64;
    Ok((angle / n, flips / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Chamfer distance multiplied by 10^3.
    pub chamfer_x1000: f64,
    pub normal_consistency: f64,
    pub samples: usize,
}

pub fn evaluate_meshes<R: Rng + ?Sized>(mesh: &TriMesh, reference: &TriMesh, samples: usize, rng: &mut R) -> Result<EvaluationReport> {
    let (pa, na) = sample_mesh(mesh, samples, rng)?;
    let (pb, nb) = sample_mesh(reference, samples, rng)?;
    Ok(EvaluationReport {
        chamfer_x1000: 1e3 * chamfer_points(&pa, &pb)?,
        normal_consistency: normal_consistency_points(&pa, &na, &pb, &nb)?,
        samples,
    })
}
