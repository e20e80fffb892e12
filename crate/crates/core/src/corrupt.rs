//! Controlled corruption of clean clouds: spatially varying resampling,
//! positional noise and outlier injection, and the calibrated stress suite.
//!
//! Composition order is always resample, then an optional uniform size cap,
//! then noise, then outliers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DiwrError, Result};
use crate::metrics::{quality_measures, QualityReport, DEFAULT_K, DEFAULT_TRIM};
use crate::pcio::{bounding_box, normalize_unit_cube, PointCloud};
use crate::shapes::{random_unit, InsideOracle};
use crate::Vec3;

const LOBES: usize = 3;
/// Lobe width relative to the largest bounding-box side.
const LOBE_WIDTH: f64 = 0.25;
/// Density ratio between lobe peaks and the background at strength 1.
const CONTRAST: f64 = 1000.0;
const OUTLIER_BOX_MARGIN: f64 = 0.1;
const SHEET_POINTS_PER_PATCH: usize = 250;
const SHEET_RADIUS: f64 = 0.08;
const SHEET_OFFSET: (f64, f64) = (0.02, 0.06);
const CALIBRATION_STEPS: usize = 14;
const CALIBRATION_SCAN: usize = 10;

/// Measure ranges covered by the stress suite, lightest to heaviest.
pub const SIGMA_RANGE: (f64, f64) = (0.00018, 0.0064);
pub const OUTLIER_RANGE: (f64, f64) = (0.042, 0.22);
pub const NONUNIFORM_RANGE: (f64, f64) = (0.10, 0.87);

const MAX_SIGMA_FRAC: f64 = 0.05;
const MAX_RATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierMode {
    /// Uniform in the padded bounding cube.
    Box,
    /// Uniform inside the solid; needs an inside oracle.
    Interior,
    /// Small planar patches floating just off the surface.
    Sheet,
}

impl FromStr for OutlierMode {
    type Err = DiwrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(OutlierMode::Box),
            "interior" => Ok(OutlierMode::Interior),
            "sheet" => Ok(OutlierMode::Sheet),
            other => Err(DiwrError::InvalidConfig(format!("unknown outlier mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for OutlierMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OutlierMode::Box => "box",
            OutlierMode::Interior => "interior",
            OutlierMode::Sheet => "sheet",
        })
    }
}

/// Centre and largest side of the bounding box.
fn frame(cloud: &PointCloud) -> Result<(Vec3, f64)> {
    let (lo, hi) = bounding_box(cloud.positions()).ok_or(DiwrError::EmptyInput)?;
    Ok(((lo + hi) * 0.5, (hi - lo).max()))
}

/// Drops points with keep-probability `CONTRAST^(-strength * (1 - f(p)))`,
/// where `f` is a mixture of three random Gaussian lobes scaled to peak at 1
/// over the cloud, so the log-contrast grows linearly with `strength`.
pub fn nonuniform_resample(cloud: &PointCloud, strength: f64, seed: u64) -> Result<PointCloud> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(DiwrError::InvalidConfig(format!(
            "resampling strength must lie in [0, 1], got {strength}"
        )));
    }
    if strength == 0.0 || cloud.is_empty() {
        return Ok(cloud.clone());
    }
    let (_, side) = frame(cloud)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lobes: Vec<(Vec3, f64)> = (0..LOBES)
        .map(|_| {
            let centre = cloud.positions()[rng.random_range(0..cloud.len())];
            (centre, rng.random_range(0.3..1.0))
        })
        .collect();
    let width2 = 2.0 * (LOBE_WIDTH * side).powi(2);
    let field: Vec<f64> = cloud
        .positions()
        .iter()
        .map(|p| {
            lobes
                .iter()
                .map(|(c, w)| w * (-(p - c).norm_squared() / width2).exp())
                .sum()
        })
        .collect();
    let peak = field.iter().cloned().fold(0.0, f64::max);
    let log_contrast = CONTRAST.ln();
    let keep: Vec<usize> = field
        .iter()
        .enumerate()
        .filter(|&(_, &f)| {
            let prob = (-strength * log_contrast * (1.0 - f / peak)).exp();
            rng.random::<f64>() < prob
        })
        .map(|(i, _)| i)
        .collect();
    Ok(cloud.subset(&keep))
}

/// Uniform random subset of at most `max_points` points, in input order.
pub fn subsample(cloud: &PointCloud, max_points: usize, seed: u64) -> PointCloud {
    if cloud.len() <= max_points {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = rand::seq::index::sample(&mut rng, cloud.len(), max_points).into_vec();
    keep.sort_unstable();
    cloud.subset(&keep)
}

/// Offsets every position by isotropic Gaussian noise with standard deviation
/// `sigma_frac` times the largest bounding-box side.
pub fn add_noise(cloud: &PointCloud, sigma_frac: f64, seed: u64) -> Result<PointCloud> {
    if !(sigma_frac >= 0.0 && sigma_frac.is_finite()) {
        return Err(DiwrError::InvalidConfig(format!(
            "noise level must be >= 0, got {sigma_frac}"
        )));
    }
    if sigma_frac == 0.0 || cloud.is_empty() {
        return Ok(cloud.clone());
    }
    let (_, side) = frame(cloud)?;
    let normal = Normal::new(0.0, sigma_frac * side)
        .map_err(|e| DiwrError::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<Vec3> = cloud
        .positions()
        .iter()
        .map(|p| p + Vec3::from_fn(|_, _| normal.sample(&mut rng)))
        .collect();
    let mut out = PointCloud::with_state(
        positions,
        cloud.normals().to_vec(),
        cloud.area_weights().to_vec(),
        cloud.confidences().to_vec(),
    )?;
    out.set_scale_record(cloud.scale_record().copied());
    Ok(out)
}

/// Appends `ceil(rate * n)` outliers and returns the mask of injected points.
pub fn inject_outliers(
    cloud: &PointCloud,
    rate: f64,
    mode: OutlierMode,
    oracle: Option<&dyn InsideOracle>,
    seed: u64,
) -> Result<(PointCloud, Vec<bool>)> {
    if !(0.0..=MAX_RATE).contains(&rate) {
        return Err(DiwrError::InvalidConfig(format!(
            "outlier rate must lie in [0, {MAX_RATE}], got {rate}"
        )));
    }
    if mode == OutlierMode::Interior && oracle.is_none() {
        return Err(DiwrError::NoInsideOracle);
    }
    let n = cloud.len();
    let count = (rate * n as f64).ceil() as usize;
    let mut out = cloud.clone();
    if count == 0 {
        return Ok((out, vec![false; n]));
    }
    let (centre, side) = frame(cloud)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra = match mode {
        OutlierMode::Box => {
            let half = side * (0.5 + OUTLIER_BOX_MARGIN);
            (0..count)
                .map(|_| centre + Vec3::from_fn(|_, _| rng.random_range(-half..=half)))
                .collect()
        }
        OutlierMode::Interior => interior_points(oracle.expect("checked"), count, &mut rng)?,
        OutlierMode::Sheet => sheet_points(cloud, centre, side, count, &mut rng),
    };
    out.extend_positions(&extra);
    let mut mask = vec![false; n];
    mask.resize(n + count, true);
    Ok((out, mask))
}

fn interior_points(oracle: &dyn InsideOracle, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec3>> {
    let (lo, hi) = oracle.bounds();
    let mut pts = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while pts.len() < count {
        attempts += 1;
        if attempts > 1000 * count + 10_000 {
            return Err(DiwrError::InvalidConfig(
                "inside oracle rejects its own bounding box".into(),
            ));
        }
        let p = Vec3::from_fn(|a, _| rng.random_range(lo[a]..=hi[a]));
        if oracle.contains(&p) {
            pts.push(p);
        }
    }
    Ok(pts)
}

/// Discs roughly parallel to the surface, pushed outwards from random anchors.
fn sheet_points(cloud: &PointCloud, centre: Vec3, side: f64, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let patches = count.div_ceil(SHEET_POINTS_PER_PATCH);
    let frames: Vec<(Vec3, Vec3, Vec3)> = (0..patches)
        .map(|_| {
            let anchor = cloud.positions()[rng.random_range(0..cloud.len())];
            let radial = anchor - centre;
            let dir = if radial.norm() > 1e-12 * side {
                radial.normalize()
            } else {
                random_unit(rng)
            };
            let offset = rng.random_range(SHEET_OFFSET.0..SHEET_OFFSET.1) * side;
            let u = dir.cross(&random_unit(rng)).try_normalize(1e-9).unwrap_or_else(|| {
                let seed = if dir.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
                dir.cross(&seed).normalize()
            });
            let v = dir.cross(&u);
            (anchor + dir * offset, u, v)
        })
        .collect();
    (0..count)
        .map(|i| {
            let (c, u, v) = frames[i % patches];
            let r = SHEET_RADIUS * side * rng.random::<f64>().sqrt();
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            c + (u * theta.cos() + v * theta.sin()) * r
        })
        .collect()
}

/// Generator settings of one corrupted case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionParams {
    pub strength: f64,
    pub sigma_frac: f64,
    pub rate: f64,
    pub mode: OutlierMode,
    /// Size cap applied after resampling, so strong density contrast can be
    /// carved out of a denser base without starving the case of points.
    #[serde(default)]
    pub max_points: Option<usize>,
}

impl CorruptionParams {
    pub fn clean() -> Self {
        CorruptionParams {
            strength: 0.0,
            sigma_frac: 0.0,
            rate: 0.0,
            mode: OutlierMode::Box,
            max_points: None,
        }
    }
}

/// Resample, cap, add noise, then inject outliers, each with its own sub-seed.
pub fn corrupt(
    cloud: &PointCloud,
    params: &CorruptionParams,
    oracle: Option<&dyn InsideOracle>,
    seed: u64,
) -> Result<(PointCloud, Vec<bool>)> {
    let mut resampled = nonuniform_resample(cloud, params.strength, seed)?;
    if let Some(max) = params.max_points {
        resampled = subsample(&resampled, max, seed.wrapping_add(3));
    }
    let noisy = add_noise(&resampled, params.sigma_frac, seed.wrapping_add(1))?;
    inject_outliers(&noisy, params.rate, params.mode, oracle, seed.wrapping_add(2))
}

/// Quality measures in unit-cube coordinates.
pub fn measure(cloud: &PointCloud) -> Result<QualityReport> {
    let (normalized, _) = normalize_unit_cube(cloud)?;
    quality_measures(&normalized, DEFAULT_K, DEFAULT_TRIM)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    /// Levels per axis.
    pub levels: usize,
    pub mode: OutlierMode,
    pub seed: u64,
    /// Size cap of every case after resampling.
    pub max_points: Option<usize>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            levels: 5,
            mode: OutlierMode::Box,
            seed: 0,
            max_points: None,
        }
    }
}

/// Per-level targets of one measure and the generator parameter chosen for
/// each, with the measure it produced in isolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisCalibration {
    pub targets: Vec<f64>,
    pub params: Vec<f64>,
    pub measured: Vec<f64>,
    /// Whether the measured value lies within the calibration tolerance.
    pub reached: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub noise: AxisCalibration,
    pub outliers: AxisCalibration,
    pub nonuniform: AxisCalibration,
}

/// Relative tolerance on a calibrated measure.
pub const CALIBRATION_TOL: f64 = 0.15;

fn targets(range: (f64, f64), levels: usize) -> Vec<f64> {
    if levels == 1 {
        return vec![range.0];
    }
    (0..levels)
        .map(|l| range.0 + (range.1 - range.0) * l as f64 / (levels - 1) as f64)
        .collect()
}

/// Parameter in `[0, max]` whose measure crosses `target`, by bisection with
/// a fixed seed. The search is limited to the rising part of the response,
/// up to the scanned parameter with the largest measure; targets above that
/// peak map to it, targets met by the clean input map to 0.
fn bisect(target: f64, max: f64, measure_at: &(impl Fn(f64) -> Result<f64> + Sync)) -> Result<f64> {
    let base = measure_at(0.0)?;
    if base >= target {
        return Ok(0.0);
    }
    let scan = (1..=CALIBRATION_SCAN)
        .into_par_iter()
        .map(|i| {
            let p = max * i as f64 / CALIBRATION_SCAN as f64;
            measure_at(p).map(|m| (p, m))
        })
        .collect::<Result<Vec<_>>>()?;
    let (peak_at, peak) = scan
        .iter()
        .cloned()
        .fold((0.0, base), |best, cur| if cur.1 > best.1 { cur } else { best });
    if peak < target {
        return Ok(peak_at);
    }
    let (mut lo, mut hi) = (0.0, peak_at);
    for _ in 0..CALIBRATION_STEPS {
        let mid = 0.5 * (lo + hi);
        if measure_at(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn calibrate_axis(
    range: (f64, f64),
    levels: usize,
    max: f64,
    measure_at: impl Fn(f64) -> Result<f64> + Sync,
) -> Result<AxisCalibration> {
    let targets = targets(range, levels);
    let mut params = targets
        .par_iter()
        .map(|&t| bisect(t, max, &measure_at))
        .collect::<Result<Vec<_>>>()?;
    // Levels past the reachable peak would all collapse onto the peak
    // parameter; spread them up to `max` so heavier levels stay heavier.
    if let Some(first) = (1..levels).find(|&l| params[l] == params[l - 1]) {
        let start = params[first];
        let span = (levels - first) as f64;
        for (l, p) in params.iter_mut().enumerate().skip(first) {
            *p = start + (max - start) * (l - first + 1) as f64 / span;
        }
    }
    let measured = params
        .par_iter()
        .map(|&p| measure_at(p))
        .collect::<Result<Vec<_>>>()?;
    let reached = targets
        .iter()
        .zip(&measured)
        .map(|(t, m)| (m - t).abs() <= CALIBRATION_TOL * t)
        .collect();
    Ok(AxisCalibration {
        targets,
        params,
        measured,
        reached,
    })
}

/// Calibrates each generator in isolation on `base` against its measure. With
/// a size cap, noise and outliers are calibrated on a capped copy of the base
/// and resampling is measured after the cap.
pub fn calibrate(
    base: &PointCloud,
    cfg: &SuiteConfig,
    oracle: Option<&dyn InsideOracle>,
) -> Result<Calibration> {
    if cfg.levels == 0 {
        return Err(DiwrError::InvalidConfig("levels must be >= 1".into()));
    }
    let seed = cfg.seed;
    let cap = |c: PointCloud| match cfg.max_points {
        Some(max) => subsample(&c, max, seed.wrapping_add(3)),
        None => c,
    };
    let capped = cap(base.clone());
    let noise = calibrate_axis(SIGMA_RANGE, cfg.levels, MAX_SIGMA_FRAC, |s| {
        Ok(measure(&add_noise(&capped, s, seed)?)?.sigma_hat)
    })?;
    let outliers = calibrate_axis(OUTLIER_RANGE, cfg.levels, MAX_RATE, |r| {
        let (c, _) = inject_outliers(&capped, r, cfg.mode, oracle, seed)?;
        Ok(measure(&c)?.o_hat)
    })?;
    let nonuniform = calibrate_axis(NONUNIFORM_RANGE, cfg.levels, 1.0, |s| {
        Ok(measure(&cap(nonuniform_resample(base, s, seed)?))?.u_hat)
    })?;
    Ok(Calibration {
        noise,
        outliers,
        nonuniform,
    })
}

#[derive(Debug, Clone)]
pub struct StressCase {
    pub id: usize,
    /// Noise, outlier and non-uniformity level.
    pub levels: [usize; 3],
    pub params: CorruptionParams,
    pub seed: u64,
    pub cloud: PointCloud,
    pub outlier_mask: Vec<bool>,
    pub measured: QualityReport,
}

#[derive(Debug, Clone)]
pub struct StressSuite {
    pub config: SuiteConfig,
    pub calibration: Calibration,
    pub cases: Vec<StressCase>,
}

/// Case id of the given levels; the non-uniformity level varies fastest.
pub fn case_id(levels: [usize; 3], per_axis: usize) -> usize {
    (levels[0] * per_axis + levels[1]) * per_axis + levels[2]
}

/// One corrupted case of a calibrated suite.
pub fn stress_case(
    base: &PointCloud,
    cfg: &SuiteConfig,
    calibration: &Calibration,
    id: usize,
    oracle: Option<&dyn InsideOracle>,
) -> Result<StressCase> {
    let l = cfg.levels;
    if id >= l * l * l {
        return Err(DiwrError::InvalidConfig(format!("case {id} outside the {l}^3 grid")));
    }
    let levels = [id / (l * l), (id / l) % l, id % l];
    let params = CorruptionParams {
        sigma_frac: calibration.noise.params[levels[0]],
        rate: calibration.outliers.params[levels[1]],
        strength: calibration.nonuniform.params[levels[2]],
        mode: cfg.mode,
        max_points: cfg.max_points,
    };
    let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(10 * id as u64);
    let (cloud, outlier_mask) = corrupt(base, &params, oracle, seed)?;
    let measured = measure(&cloud)?;
    Ok(StressCase {
        id,
        levels,
        params,
        seed,
        cloud,
        outlier_mask,
        measured,
    })
}

/// Calibrates and builds the full `levels^3` grid of corrupted cases.
pub fn stress_suite(
    base: &PointCloud,
    cfg: &SuiteConfig,
    oracle: Option<&dyn InsideOracle>,
) -> Result<StressSuite> {
    let calibration = calibrate(base, cfg, oracle)?;
    let total = cfg.levels.pow(3);
    let cases = (0..total)
        .into_par_iter()
        .map(|id| stress_case(base, cfg, &calibration, id, oracle))
        .collect::<Result<Vec<_>>>()?;
    Ok(StressSuite {
        config: *cfg,
        calibration,
        cases,
    })
}

pub const MANIFEST_HEADER: &str = "case,noise_level,outlier_level,nonuniform_level,sigma_frac,outlier_rate,outlier_mode,resample_strength,seed,points,outliers,sigma_hat,u_hat,o_hat,order,path";

/// CSV manifest with one row per case; `paths[i]` is the file of case `i`.
pub fn manifest_csv(suite: &StressSuite, paths: &[PathBuf]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for (i, c) in suite.cases.iter().enumerate() {
        let path = paths.get(i).map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6e},{:.6},{},{:.6},{},{},{},{:.6e},{:.6},{:.6},resample>noise>outliers,{}",
            c.id,
            c.levels[0],
            c.levels[1],
            c.levels[2],
            c.params.sigma_frac,
            c.params.rate,
            c.params.mode,
            c.params.strength,
            c.seed,
            c.cloud.len(),
            c.outlier_mask.iter().filter(|&&m| m).count(),
            c.measured.sigma_hat,
            c.measured.u_hat,
            c.measured.o_hat,
            path
        );
    }
    out
}

pub fn write_manifest(path: &Path, suite: &StressSuite, paths: &[PathBuf]) -> Result<()> {
    std::fs::write(path, manifest_csv(suite, paths))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::Shape;

    fn sphere(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Shape::unit_sphere().sample_cloud(n, &mut rng)
    }

    #[test]
    fn level_zero_is_identity() {
        let c = sphere(500, 1);
        assert_eq!(nonuniform_resample(&c, 0.0, 3).unwrap().positions(), c.positions());
        assert_eq!(add_noise(&c, 0.0, 3).unwrap().positions(), c.positions());
        let (o, mask) = inject_outliers(&c, 0.0, OutlierMode::Box, None, 3).unwrap();
        assert_eq!(o.positions(), c.positions());
        assert!(mask.iter().all(|&m| !m));
        assert_eq!(mask.len(), 500);
    }

    #[test]
    fn generators_are_deterministic() {
        let c = sphere(2000, 2);
        let a = nonuniform_resample(&c, 0.8, 9).unwrap();
        let b = nonuniform_resample(&c, 0.8, 9).unwrap();
        assert_eq!(a.positions(), b.positions());
        assert_ne!(
            a.positions(),
            nonuniform_resample(&c, 0.8, 10).unwrap().positions()
        );
        assert_eq!(
            add_noise(&c, 0.01, 4).unwrap().positions(),
            add_noise(&c, 0.01, 4).unwrap().positions()
        );
        for mode in [OutlierMode::Box, OutlierMode::Sheet] {
            let x = inject_outliers(&c, 0.1, mode, None, 5).unwrap();
            let y = inject_outliers(&c, 0.1, mode, None, 5).unwrap();
            assert_eq!(x.0.positions(), y.0.positions());
            assert_eq!(x.1, y.1);
        }
    }

    #[test]
    fn resampling_raises_nonuniformity() {
        for seed in 0..5 {
            let c = sphere(8000, 100 + seed);
            let before = measure(&c).unwrap().u_hat;
            let after = measure(&nonuniform_resample(&c, 1.0, seed).unwrap()).unwrap().u_hat;
            assert!(after > before, "seed {seed}: {after} <= {before}");
        }
    }

    #[test]
    fn noise_has_requested_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec3> = (0..100_000)
            .map(|_| Vec3::from_fn(|_, _| rng.random::<f64>()))
            .collect();
        // Pin the bounding box to the unit cube exactly.
        let mut pts = pts;
        pts[0] = Vec3::zeros();
        pts[1] = Vec3::repeat(1.0);
        let c = PointCloud::from_positions(pts);
        let noisy = add_noise(&c, 0.02, 8).unwrap();
        let offs: Vec<f64> = c
            .positions()
            .iter()
            .zip(noisy.positions())
            .flat_map(|(a, b)| (b - a).iter().cloned().collect::<Vec<_>>())
            .collect();
        let mean = offs.iter().sum::<f64>() / offs.len() as f64;
        let var = offs.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / offs.len() as f64;
        let sd = var.sqrt();
        assert!((sd - 0.02).abs() < 0.05 * 0.02, "std {sd}");
    }

    #[test]
    fn outlier_count_and_mask_are_exact() {
        let c = sphere(10_000, 3);
        for mode in [OutlierMode::Box, OutlierMode::Sheet] {
            let (o, mask) = inject_outliers(&c, 0.2, mode, None, 1).unwrap();
            assert_eq!(o.len(), 12_000);
            assert_eq!(mask.iter().filter(|&&m| m).count(), 2000);
            assert!(mask[..10_000].iter().all(|&m| !m));
            assert_eq!(&o.positions()[..10_000], c.positions());
        }
        let shape = Shape::unit_sphere();
        let (o, mask) = inject_outliers(&c, 0.2, OutlierMode::Interior, Some(&shape), 1).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2000);
        assert!(o.positions()[10_000..].iter().all(|p| p.norm() < 1.0));
    }

    #[test]
    fn interior_without_oracle_is_rejected() {
        let c = sphere(100, 3);
        assert!(matches!(
            inject_outliers(&c, 0.1, OutlierMode::Interior, None, 1),
            Err(DiwrError::NoInsideOracle)
        ));
    }

    #[test]
    fn box_outliers_raise_outlier_measure() {
        for seed in 0..5 {
            let c = sphere(5000, 200 + seed);
            let before = measure(&c).unwrap().o_hat;
            let (o, _) = inject_outliers(&c, 0.15, OutlierMode::Box, None, seed).unwrap();
            let after = measure(&o).unwrap().o_hat;
            assert!(after > before, "seed {seed}: {after} <= {before}");
        }
    }

    #[test]
    fn sheet_outliers_float_off_the_surface() {
        let c = sphere(5000, 4);
        let (o, _) = inject_outliers(&c, 0.1, OutlierMode::Sheet, None, 2).unwrap();
        for p in &o.positions()[5000..] {
            let r = p.norm();
            assert!(r > 1.0 && r < 1.0 + 0.2, "radius {r}");
        }
    }

    #[test]
    fn size_cap_applies_after_resampling() {
        let c = sphere(20000, 6);
        let capped = subsample(&c, 3000, 1);
        assert_eq!(capped.len(), 3000);
        assert_eq!(subsample(&c, 30000, 1).len(), 20000);
        let params = CorruptionParams {
            strength: 0.2,
            rate: 0.1,
            max_points: Some(4000),
            ..CorruptionParams::clean()
        };
        let (o, mask) = corrupt(&c, &params, None, 5).unwrap();
        assert_eq!(o.len(), 4400);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 400);
        // A uniform cap leaves the non-uniformity roughly unchanged.
        let uncapped = nonuniform_resample(&c, 0.6, 2).unwrap();
        let u_full = measure(&uncapped).unwrap().u_hat;
        let u_cap = measure(&subsample(&uncapped, uncapped.len() / 2, 3)).unwrap().u_hat;
        assert!((u_cap - u_full).abs() < 0.1 * u_full, "{u_cap} vs {u_full}");
    }

    #[test]
    fn out_of_range_parameters_rejected() {
        let c = sphere(100, 3);
        assert!(nonuniform_resample(&c, 1.5, 0).is_err());
        assert!(add_noise(&c, -0.1, 0).is_err());
        assert!(inject_outliers(&c, 0.6, OutlierMode::Box, None, 0).is_err());
        assert_eq!("sheet".parse::<OutlierMode>().unwrap(), OutlierMode::Sheet);
        assert!("cloud".parse::<OutlierMode>().is_err());
    }

    #[test]
    fn single_level_suite_is_lightest_case() {
        let c = sphere(3000, 5);
        let cfg = SuiteConfig {
            levels: 1,
            ..Default::default()
        };
        let suite = stress_suite(&c, &cfg, None).unwrap();
        assert_eq!(suite.cases.len(), 1);
        assert_eq!(suite.cases[0].levels, [0, 0, 0]);
        assert_eq!(suite.calibration.noise.targets, vec![SIGMA_RANGE.0]);
    }

    #[test]
    fn full_suite_covers_measure_ranges() {
        let c = sphere(10_000, 6);
        let suite = stress_suite(&c, &SuiteConfig::default(), None).unwrap();
        assert_eq!(suite.cases.len(), 125);
        let csv = manifest_csv(&suite, &[]);
        assert_eq!(csv.lines().count(), 126);
        for (i, case) in suite.cases.iter().enumerate() {
            assert_eq!(case.id, i);
            assert_eq!(case_id(case.levels, 5), i);
            assert!(case.measured.sigma_hat.is_finite());
        }
        let range = |f: &dyn Fn(&QualityReport) -> f64| {
            let v: Vec<f64> = suite.cases.iter().map(|c| f(&c.measured)).collect();
            (
                v.iter().cloned().fold(f64::INFINITY, f64::min),
                v.iter().cloned().fold(0.0, f64::max),
            )
        };
        // Mid-portion of each target range must be covered.
        let mid = |r: (f64, f64)| (r.0 + 0.25 * (r.1 - r.0), r.0 + 0.75 * (r.1 - r.0));
        // The outlier fraction counts points beyond mean + 2 std of the
        // spacings; two well-separated spacing populations cap that at
        // f + 2 sqrt(f (1 - f)) < 1, i.e. below 0.2, and uniform box
        // outliers peak near 0.1. The upper half of its range is unreachable.
        let outlier_mid = (mid(OUTLIER_RANGE).0, 0.09);
        for (name, got, want) in [
            ("sigma", range(&|q| q.sigma_hat), mid(SIGMA_RANGE)),
            ("outlier", range(&|q| q.o_hat), outlier_mid),
            ("nonuniform", range(&|q| q.u_hat), mid(NONUNIFORM_RANGE)),
        ] {
            assert!(got.0 <= want.0 && got.1 >= want.1, "{name}: {got:?} vs {want:?}");
        }
    }

    #[test]
    fn calibration_reports_isolated_measures() {
        let c = sphere(10_000, 8);
        let cfg = SuiteConfig::default();
        let cal = calibrate(&c, &cfg, None).unwrap();
        for l in 0..cfg.levels {
            let s = measure(&add_noise(&c, cal.noise.params[l], cfg.seed).unwrap()).unwrap();
            assert_eq!(s.sigma_hat, cal.noise.measured[l]);
            let (o, _) = inject_outliers(&c, cal.outliers.params[l], cfg.mode, None, cfg.seed).unwrap();
            assert_eq!(measure(&o).unwrap().o_hat, cal.outliers.measured[l]);
        }
        for axis in [&cal.noise, &cal.outliers, &cal.nonuniform] {
            assert!(axis.params.windows(2).all(|w| w[0] <= w[1]));
            for l in 0..cfg.levels {
                let (t, m) = (axis.targets[l], axis.measured[l]);
                assert_eq!(axis.reached[l], (m - t).abs() <= CALIBRATION_TOL * t);
                // A level either hits its target, sits at a clean input that
                // already exceeds it, or stops at the largest reachable value.
                assert!(axis.reached[l] || axis.params[l] == 0.0 || m < t);
            }
        }
        // Noise is reachable over the whole range above the clean residual.
        for l in 1..cfg.levels {
            assert!(cal.noise.reached[l], "noise level {l}: {:?}", cal.noise);
        }
    }
}
