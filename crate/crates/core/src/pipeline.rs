//! End-to-end reconstruction: normalisation, initialisation, optimisation,
//! confidence filtering and extraction, with results mapped back to the
//! input coordinates.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{DiwrError, Result};
use crate::extract::{extract_isosurface, retain_high_confidence, ExtractOptions};
use crate::metrics::{quality_measures, QualityReport, DEFAULT_K, DEFAULT_TRIM};
use crate::optimizer::{run_diwr_with, LogEntry, OptimConfig, RunOutputs};
use crate::orientation::{init_area_uniform, init_area_voronoi, init_normals_random, update_normals};
use crate::pcio::{normalize_unit_cube, PointCloud, ScaleRecord, TriMesh};
use crate::winding::SourceTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaInit {
    /// Clipped 2-D Voronoi cells of the projected neighbourhood.
    Voronoi,
    /// `a_i = 1`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Optimiser settings, flattened so a config file mirrors them directly.
    #[serde(flatten)]
    pub optim: OptimConfig,
    pub area_init: AreaInit,
    pub voronoi_k: usize,
    /// Seed of the random initial normals.
    pub seed: u64,
    /// Extraction lattice vertices per axis.
    pub extract_resolution: usize,
    pub iso: f64,
    pub keep_all_components: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            optim: OptimConfig::default(),
            area_init: AreaInit::Voronoi,
            voronoi_k: 12,
            seed: 0,
            extract_resolution: 128,
            iso: 0.5,
            keep_all_components: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.extract_options().validate()?;
        if self.area_init == AreaInit::Voronoi && self.voronoi_k < 3 {
            return Err(DiwrError::InvalidConfig("voronoi_k must be >= 3".into()));
        }
        Ok(())
    }

    /// Extraction settings sharing beta, r_s and the box with the optimiser.
    pub fn extract_options(&self) -> ExtractOptions {
        ExtractOptions {
            resolution: self.extract_resolution,
            iso: self.iso,
            beta: self.optim.beta,
            r_s: self.optim.r_s,
            box_margin: self.optim.box_margin,
            keep_all_components: self.keep_all_components,
        }
    }
}

/// Normalised copy of `cloud` with random normals, initial areas and `c = 1`,
/// plus the record mapping it back.
pub fn prepare(cloud: &PointCloud, cfg: &PipelineConfig) -> Result<(PointCloud, ScaleRecord)> {
    if cloud.is_empty() {
        return Err(DiwrError::EmptyInput);
    }
    let (mut norm, record) = normalize_unit_cube(cloud)?;
    init_normals_random(&mut norm, cfg.seed);
    let areas = match cfg.area_init {
        AreaInit::Voronoi => {
            if norm.len() <= cfg.voronoi_k {
                return Err(DiwrError::TooFewPoints {
                    got: norm.len(),
                    need: cfg.voronoi_k + 1,
                });
            }
            init_area_voronoi(&norm, cfg.voronoi_k)?
        }
        AreaInit::Uniform => init_area_uniform(&norm),
    };
    norm.set_area_weights(areas);
    norm.set_confidences(vec![1.0; norm.len()]);
    Ok((norm, record))
}

/// Copy of a normalised cloud with positions mapped back through `record`.
pub fn to_original(cloud: &PointCloud, record: &ScaleRecord) -> Result<PointCloud> {
    let positions = cloud.positions().iter().map(|p| record.inverse(p)).collect();
    let mut out = PointCloud::with_state(
        positions,
        cloud.normals().to_vec(),
        cloud.area_weights().to_vec(),
        cloud.confidences().to_vec(),
    )?;
    out.set_densities(cloud.densities().to_vec());
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Closed mesh in input coordinates.
    pub mesh: TriMesh,
    /// Optimised cloud in normalised coordinates.
    pub optimized: PointCloud,
    /// Retained high-confidence points in input coordinates.
    pub retained: PointCloud,
    pub retained_indices: Vec<usize>,
    pub record: ScaleRecord,
    /// Measures of the normalised input.
    pub quality: QualityReport,
    pub log: Vec<LogEntry>,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs the full pipeline on a raw cloud.
pub fn reconstruct(cloud: &PointCloud, cfg: &PipelineConfig, outputs: &RunOutputs) -> Result<Reconstruction> {
    cfg.validate()?;
    let (prepared, record) = prepare(cloud, cfg)?;
    let quality = quality_measures(&prepared, DEFAULT_K, DEFAULT_TRIM)?;
    let run = run_diwr_with(prepared, &cfg.optim, outputs).map_err(|e| e.error)?;
    let (filtered, retained_indices) = retain_high_confidence(&run.cloud, cfg.optim.tau_in)?;
    let mesh = extract_isosurface(&filtered, &cfg.extract_options())?;
    Ok(Reconstruction {
        mesh: mesh.map_vertices(|v| record.inverse(v)),
        retained: to_original(&filtered, &record)?,
        retained_indices,
        optimized: run.cloud,
        record,
        quality,
        log: run.state.log,
        iterations: run.iterations,
        converged: run.converged,
    })
}

/// Initialisation plus one globally seeded normal update, in input
/// coordinates.
pub fn orient(cloud: &PointCloud, cfg: &PipelineConfig) -> Result<PointCloud> {
    cfg.validate()?;
    let (mut prepared, record) = prepare(cloud, cfg)?;
    let tree = Arc::new(SourceTree::build(prepared.positions()));
    let (normals, _) = update_normals(
        &prepared,
        &tree,
        cfg.optim.beta,
        &cfg.optim.orientation,
        true,
        2.0 * cfg.optim.r_s,
    );
    prepared.set_normals(normals);
    to_original(&prepared, &record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::Shape;
    use crate::Vec3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shifted_sphere(n: usize, seed: u64) -> (PointCloud, Vec<Vec3>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::Sphere {
            center: Vec3::new(3.0, -1.0, 2.0),
            radius: 2.0,
        };
        let c = shape.sample_cloud(n, &mut rng);
        let truth = c.normals().to_vec();
        (PointCloud::from_positions(c.positions().to_vec()), truth)
    }

    #[test]
    fn prepare_normalises_and_initialises() {
        let (c, _) = shifted_sphere(2000, 1);
        let (p, rec) = prepare(&c, &PipelineConfig::default()).unwrap();
        assert!(p.validate(false).is_ok());
        assert!(p.positions().iter().all(|q| q.iter().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x))));
        assert!(p.normals().iter().all(|n| (n.norm() - 1.0).abs() < 1e-9));
        assert!(p.confidences().iter().all(|&x| x == 1.0));
        // Areas sum to roughly the normalised surface area.
        let total: f64 = p.area_weights().iter().sum();
        let exact = Shape::unit_sphere().area() * (2.0 * rec.scale).powi(2);
        assert!((total - exact).abs() / exact < 0.15, "{total} vs {exact}");
        let back = to_original(&p, &rec).unwrap();
        for (a, b) in back.positions().iter().zip(c.positions()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn uniform_area_init_gives_ones() {
        let (c, _) = shifted_sphere(100, 2);
        let cfg = PipelineConfig {
            area_init: AreaInit::Uniform,
            ..Default::default()
        };
        let (p, _) = prepare(&c, &cfg).unwrap();
        assert!(p.area_weights().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn empty_and_tiny_inputs_rejected() {
        let cfg = PipelineConfig::default();
        assert!(matches!(
            prepare(&PointCloud::from_positions(vec![]), &cfg),
            Err(DiwrError::EmptyInput)
        ));
        let few = PointCloud::from_positions((0..5).map(|i| Vec3::new(i as f64, (i * i) as f64, 0.0)).collect());
        assert!(matches!(prepare(&few, &cfg), Err(DiwrError::TooFewPoints { .. })));
    }

    #[test]
    fn invalid_extraction_settings_rejected() {
        let cfg = PipelineConfig {
            extract_resolution: 8,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(DiwrError::InvalidConfig(_))));
    }

    #[test]
    fn orient_recovers_outward_normals_in_input_frame() {
        let (c, truth) = shifted_sphere(8000, 3);
        let out = orient(&c, &PipelineConfig::default()).unwrap();
        for (a, b) in out.positions().iter().zip(c.positions()) {
            assert!((a - b).norm() < 1e-9);
        }
        let good = out
            .normals()
            .iter()
            .zip(&truth)
            .filter(|(n, t)| n.dot(t) > 0.0)
            .count();
        assert!(good as f64 >= 0.99 * c.len() as f64, "{good} of {}", c.len());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = PipelineConfig {
            seed: 9,
            area_init: AreaInit::Uniform,
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"seed": 4}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.extract_resolution, 128);
    }
}
