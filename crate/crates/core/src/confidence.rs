//! Confidence reset at the start of every confidence stage: two-means split of
//! the winding values, density-stratified softening of the binary labels and
//! protection of points whose value is close to the global mean.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pcio::PointCloud;
use crate::spatial::KdTree;

pub const DENSITY_LEVELS: usize = 128;
/// Points with `|w - mean| <= PROTECT_BAND` keep their confidence.
pub const PROTECT_BAND: f64 = 0.1;
const LLOYD_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimeansReport {
    pub outlier_cluster_mean: f64,
    pub inlier_cluster_mean: f64,
    pub global_mean: f64,
    pub outlier_count: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceResetReport {
    pub outlier_cluster_mean: f64,
    pub inlier_cluster_mean: f64,
    pub global_mean: f64,
    pub outlier_count: usize,
    pub protected_count: usize,
    /// Mean binary label per density level; empty levels report 0.
    pub level_means: Vec<f64>,
    pub level_counts: Vec<usize>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Two-means clustering of scalar values, initialised at the extremes.
/// Returns `true` for members of the outlier cluster (the one whose mean lies
/// farther from the global mean; ties go to the higher cluster).
pub fn bimeans_split(values: &[f64]) -> (Vec<bool>, BimeansReport) {
    let n = values.len();
    let global_mean = if n == 0 { 0.0 } else { mean(values) };
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let all_inliers = |iterations| {
        (
            vec![false; n],
            BimeansReport {
                outlier_cluster_mean: f64::NAN,
                inlier_cluster_mean: global_mean,
                global_mean,
                outlier_count: 0,
                iterations,
            },
        )
    };
    if n < 2 || !(hi > lo) {
        return all_inliers(0);
    }

    let (mut c_lo, mut c_hi) = (lo, hi);
    let mut upper = vec![false; n];
    let mut iterations = 0;
    for it in 0..LLOYD_MAX_ITERS {
        iterations = it + 1;
        let mid = 0.5 * (c_lo + c_hi);
        let next: Vec<bool> = values.iter().map(|&v| v > mid).collect();
        let changed = next != upper;
        upper = next;
        let (mut s_lo, mut n_lo, mut s_hi, mut n_hi) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &u) in values.iter().zip(&upper) {
            if u {
                s_hi += v;
                n_hi += 1;
            } else {
                s_lo += v;
                n_lo += 1;
            }
        }
        if n_lo == 0 || n_hi == 0 {
            return all_inliers(iterations);
        }
        c_lo = s_lo / n_lo as f64;
        c_hi = s_hi / n_hi as f64;
        if !changed && it > 0 {
            break;
        }
    }
    let outlier_is_upper = (c_hi - global_mean).abs() >= (c_lo - global_mean).abs();
    let labels: Vec<bool> = upper.iter().map(|&u| u == outlier_is_upper).collect();
    let (om, im) = if outlier_is_upper { (c_hi, c_lo) } else { (c_lo, c_hi) };
    let outlier_count = labels.iter().filter(|&&o| o).count();
    (
        labels,
        BimeansReport {
            outlier_cluster_mean: om,
            inlier_cluster_mean: im,
            global_mean,
            outlier_count,
            iterations,
        },
    )
}

/// `rho_i = #{j != i : |p_j - p_i| <= r}`.
pub fn compute_densities(cloud: &PointCloud, r: f64) -> Vec<u32> {
    let tree = KdTree::build(cloud.positions());
    cloud
        .positions()
        .par_iter()
        .map(|p| tree.count_within(p, r).saturating_sub(1) as u32)
        .collect()
}

/// Equal-width bin of every density over `[min, max]`.
pub fn density_levels(densities: &[u32], levels: usize) -> Vec<usize> {
    let lo = densities.iter().copied().min().unwrap_or(0) as f64;
    let hi = densities.iter().copied().max().unwrap_or(0) as f64;
    let width = (hi - lo) / levels as f64;
    densities
        .iter()
        .map(|&d| {
            if width <= 0.0 {
                0
            } else {
                (((d as f64 - lo) / width) as usize).min(levels - 1)
            }
        })
        .collect()
}

/// Replaces the binary labels (`outlier -> 0`, inlier -> 1) by their mean
/// within each density level, except for protected points, which keep
/// `previous_c`.
pub fn density_stratified_reset(
    densities: &[u32],
    outliers: &[bool],
    winding_values: &[f64],
    global_mean: f64,
    previous_c: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<usize>, usize) {
    let levels = density_levels(densities, DENSITY_LEVELS);
    let mut sums = vec![0.0; DENSITY_LEVELS];
    let mut counts = vec![0usize; DENSITY_LEVELS];
    for (&l, &o) in levels.iter().zip(outliers) {
        sums[l] += if o { 0.0 } else { 1.0 };
        counts[l] += 1;
    }
    let level_means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mut protected = 0;
    let c = (0..densities.len())
        .map(|i| {
            if (winding_values[i] - global_mean).abs() <= PROTECT_BAND {
                protected += 1;
                previous_c[i]
            } else {
                level_means[levels[i]]
            }
        })
        .collect();
    (c, level_means, counts, protected)
}

/// Full reset: split on `winding_values` (self-excluded field at the points),
/// soften by density level and protect near-mean points. Densities are taken
/// from the cloud.
pub fn reset_confidences(cloud: &PointCloud, winding_values: &[f64]) -> (Vec<f64>, ConfidenceResetReport) {
    let (outliers, split) = bimeans_split(winding_values);
    let (c, level_means, level_counts, protected_count) = density_stratified_reset(
        cloud.densities(),
        &outliers,
        winding_values,
        split.global_mean,
        cloud.confidences(),
    );
    (
        c,
        ConfidenceResetReport {
            outlier_cluster_mean: split.outlier_cluster_mean,
            inlier_cluster_mean: split.inlier_cluster_mean,
            global_mean: split.global_mean,
            outlier_count: split.outlier_count,
            protected_count,
            level_means,
            level_counts,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Best 2-partition of sorted values by within-cluster sum of squares.
    fn brute_force_two_means(values: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let sse = |s: &[f64]| {
            let m = mean(s);
            s.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
        };
        let mut best = (f64::INFINITY, 1);
        for k in 1..sorted.len() {
            let cost = sse(&sorted[..k]) + sse(&sorted[k..]);
            if cost < best.0 {
                best = (cost, k);
            }
        }
        (sorted[..best.1].to_vec(), sorted[best.1..].to_vec())
    }

    #[test]
    fn small_examples() {
        let (labels, rep) = bimeans_split(&[0.1, 0.1, 0.9]);
        assert_eq!(labels, vec![false, false, true]);
        assert!((rep.global_mean - 0.36666666666666664).abs() < 1e-12);
        assert!((rep.outlier_cluster_mean - 0.9).abs() < 1e-12);

        let values = [0.45, 0.5, 0.55, 3.0];
        let (labels, _) = bimeans_split(&values);
        let (_, upper) = brute_force_two_means(&values);
        assert_eq!(upper, vec![3.0]);
        assert_eq!(labels, vec![false, false, false, true]);

        let (labels, rep) = bimeans_split(&[0.4; 7]);
        assert!(labels.iter().all(|&o| !o));
        assert_eq!(rep.outlier_count, 0);
    }

    #[test]
    fn lower_cluster_can_be_the_outlier() {
        let mut values = vec![1.0; 20];
        values.extend([-2.0, -2.1]);
        let (labels, rep) = bimeans_split(&values);
        assert!(labels[20] && labels[21]);
        assert_eq!(rep.outlier_count, 2);
        assert!(rep.outlier_cluster_mean < rep.inlier_cluster_mean);
    }

    #[test]
    fn tie_labels_higher_cluster() {
        let (labels, _) = bimeans_split(&[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(labels, vec![false, false, true, true]);
    }

    #[test]
    fn lloyd_agrees_with_brute_force_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut values: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
            values.extend((0..8).map(|_| 2.0 + rng.random::<f64>()));
            let (labels, rep) = bimeans_split(&values);
            let (lo, hi) = brute_force_two_means(&values);
            let (om, im) = (mean(&hi), mean(&lo));
            assert!((rep.outlier_cluster_mean - om).abs() < 1e-12, "{} vs {om}", rep.outlier_cluster_mean);
            assert!((rep.inlier_cluster_mean - im).abs() < 1e-12);
            assert_eq!(labels.iter().filter(|&&o| o).count(), hi.len());
        }
    }

    #[test]
    fn reset_examples() {
        // One level, half labelled outlier, none protected.
        let dens = vec![3u32; 4];
        let outl = vec![true, false, true, false];
        let w = vec![5.0, -5.0, 5.0, -5.0];
        let (c, _, _, prot) = density_stratified_reset(&dens, &outl, &w, 0.0, &[1.0; 4]);
        assert_eq!(prot, 0);
        assert!(c.iter().all(|&v| (v - 0.5).abs() < 1e-15));

        // Protected point keeps its previous value.
        let (c, _, _, prot) = density_stratified_reset(&[1, 100], &[false, true], &[0.05, 2.0], 0.0, &[0.73, 0.2]);
        assert_eq!(prot, 1);
        assert_eq!(c[0], 0.73);
        assert_eq!(c[1], 0.0);

        // Two levels: {1,1,0} -> 2/3, {0,0} -> 0.
        let dens = vec![0, 0, 0, 100, 100];
        let outl = vec![false, false, true, true, true];
        let w = vec![9.0; 5];
        let (c, means, counts, _) = density_stratified_reset(&dens, &outl, &w, 0.0, &[1.0; 5]);
        assert!((c[0] - 2.0 / 3.0).abs() < 1e-15 && (c[2] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c[3], 0.0);
        assert_eq!(counts.iter().sum::<usize>(), 5);
        assert!(means.iter().all(|m| (0.0..=1.0).contains(m)));
    }

    #[test]
    fn no_outliers_gives_full_confidence() {
        let (c, _, _, _) = density_stratified_reset(&[1, 5, 9], &[false; 3], &[3.0, 4.0, -3.0], 0.0, &[0.2; 3]);
        assert_eq!(c, vec![1.0; 3]);
    }

    #[test]
    fn density_examples() {
        let cloud = PointCloud::from_positions(vec![Vec3::zeros(), Vec3::new(0.05, 0.0, 0.0), Vec3::new(0.5, 0.5, 0.5)]);
        assert_eq!(compute_densities(&cloud, 0.06), vec![1, 1, 0]);
    }

    #[test]
    fn density_matches_brute_force_and_volume_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let pts: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let cloud = PointCloud::from_positions(pts.clone());
        let r = 0.06;
        let rho = compute_densities(&cloud, r);
        for i in (0..n).step_by(97) {
            let brute = (0..n).filter(|&j| j != i && (pts[j] - pts[i]).norm() <= r).count();
            assert_eq!(rho[i] as usize, brute);
        }
        let interior: Vec<f64> = (0..n)
            .filter(|&i| pts[i].iter().all(|&x| x > r && x < 1.0 - r))
            .map(|i| rho[i] as f64)
            .collect();
        let expect = (n - 1) as f64 * 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        let got = mean(&interior);
        assert!((got - expect).abs() / expect < 0.15, "{got} vs {expect}");
    }

    #[test]
    fn reset_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let pts: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let w: Vec<f64> = (0..n).map(|i| if i % 7 == 0 { 2.0 + rng.random::<f64>() } else { 0.5 + 0.3 * rng.random::<f64>() }).collect();
        let mut cloud = PointCloud::from_positions(pts.clone());
        cloud.set_densities(compute_densities(&cloud, 0.1));
        let (c, rep) = reset_confidences(&cloud, &w);
        assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(rep.protected_count <= n);

        let perm: Vec<usize> = (0..n).rev().collect();
        let mut cloud2 = PointCloud::from_positions(perm.iter().map(|&i| pts[i]).collect());
        cloud2.set_densities(compute_densities(&cloud2, 0.1));
        let w2: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
        let (c2, _) = reset_confidences(&cloud2, &w2);
        let mut a = c.clone();
        let mut b = c2.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }
}
