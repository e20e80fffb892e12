//! Energy terms of the area and confidence subproblems and their analytic
//! gradients.
//!
//! Every term depends on `a` and `c` only through `psi_i = a_i c_i`, so one
//! adjoint pass yields `dE/dpsi` and the chain rule gives both gradients:
//!
//! * Dirichlet: `dE/dpsi_i = n_i . sum_q M(q - p_i) v_q` with
//!   `v_q = 2 delta_q V_c grad w(q)`, i.e. the dipole-field gradient of the
//!   grid samples carrying moments `v_q`, evaluated at `p_i`.
//! * Surface: `dE/dpsi_i = n_i . sum_{j in I, j != i} r_j (p_i - p_j) / (4 pi |.|^3)`
//!   with `r_j = 2 (w_j - 1/2) / |I|`.
//! * Area: `sign(sum psi - S)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy_grid::EnergyGrid;
use crate::error::{DiwrError, Result};
use crate::pcio::PointCloud;
use crate::winding::{ChargeField, DipoleField, WindingEvaluator};
use crate::Vec3;

/// Snapshot of `a` and `c` at the start of a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBaseline {
    pub a_baseline: Vec<f64>,
    pub c_baseline: Vec<f64>,
    pub effective_sum: f64,
}

impl StageBaseline {
    pub fn capture(cloud: &PointCloud) -> Self {
        StageBaseline {
            a_baseline: cloud.area_weights().to_vec(),
            c_baseline: cloud.confidences().to_vec(),
            effective_sum: cloud.effective_sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub e_diri: f64,
    pub e_surf: f64,
    pub e_area: f64,
    pub e_conf: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.e_diri,
            self.e_surf,
            self.e_area,
            self.e_conf,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Weights of the active terms. `conf = 0` switches the confidence term off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub surf: f64,
    pub area: f64,
    pub conf: f64,
}

impl TermWeights {
    pub fn area_stage(l1: f64, l2: f64) -> Self {
        TermWeights {
            surf: l1,
            area: l2,
            conf: 0.0,
        }
    }

    pub fn conf_stage(l3: f64, l4: f64, l5: f64) -> Self {
        TermWeights {
            surf: l3,
            area: l4,
            conf: l5,
        }
    }
}

/// Field quantities shared by the energy value and its gradient.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `grad w` at every grid sample.
    pub grad_w: Vec<Vec3>,
    /// Self-excluded `w(p_j)` for `j` in the grid's high-confidence set.
    pub w_surf: Vec<f64>,
    pub e_diri: f64,
    /// `None` when the high-confidence set is empty.
    pub e_surf: Option<f64>,
}

fn check_current(cloud: &PointCloud, ev: &WindingEvaluator) -> Result<()> {
    if ev.generation() != cloud.generation() || ev.tree().len() != cloud.len() {
        return Err(DiwrError::StaleTree {
            tree: ev.generation(),
            cloud: cloud.generation(),
        });
    }
    Ok(())
}

pub fn forward(
    cloud: &PointCloud,
    grid: &EnergyGrid,
    ev: &WindingEvaluator,
) -> Result<ForwardPass> {
    check_current(cloud, ev)?;
    let grad_w = ev.grad_many(&grid.positions);
    let e_diri = dirichlet_from_gradients(grid, &grad_w);
    let w_surf: Vec<f64> = grid
        .high_conf
        .par_iter()
        .map(|&j| ev.eval_at_point(j))
        .collect();
    let e_surf = surface_from_values(&w_surf);
    Ok(ForwardPass {
        grad_w,
        w_surf,
        e_diri,
        e_surf,
    })
}

fn dirichlet_from_gradients(grid: &EnergyGrid, grad_w: &[Vec3]) -> f64 {
    grid.weights
        .iter()
        .zip(grad_w)
        .map(|(d, g)| d * g.norm_squared())
        .sum::<f64>()
        * grid.voxel_volume
}

fn surface_from_values(w: &[f64]) -> Option<f64> {
    (!w.is_empty()).then(|| w.iter().map(|v| (v - 0.5) * (v - 0.5)).sum::<f64>() / w.len() as f64)
}

/// `sum_q delta_q V_c |grad w(q)|^2` over the retained samples.
pub fn dirichlet_energy(grid: &EnergyGrid, ev: &WindingEvaluator) -> f64 {
    dirichlet_from_gradients(grid, &ev.grad_many(&grid.positions))
}

/// Mean of `(w(p_i) - 1/2)^2` over `indices`, self-excluded.
pub fn surface_energy(ev: &WindingEvaluator, indices: &[usize]) -> Result<f64> {
    let w: Vec<f64> = indices.par_iter().map(|&j| ev.eval_at_point(j)).collect();
    surface_from_values(&w).ok_or(DiwrError::EmptyHighConfidenceSet)
}

pub fn area_energy(cloud: &PointCloud, baseline: &StageBaseline) -> f64 {
    (cloud.effective_sum() - baseline.effective_sum).abs()
}

pub fn conf_energy(cloud: &PointCloud) -> f64 {
    cloud
        .confidences()
        .iter()
        .map(|c| (c * (1.0 - c)).abs())
        .sum()
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn breakdown(
    cloud: &PointCloud,
    baseline: &StageBaseline,
    fwd: &ForwardPass,
    w: &TermWeights,
) -> Result<EnergyBreakdown> {
    let e_surf = fwd.e_surf.ok_or(DiwrError::EmptyHighConfidenceSet)?;
    let e_area = area_energy(cloud, baseline);
    let e_conf = conf_energy(cloud);
    let mut total = fwd.e_diri + w.surf * e_surf + w.area * e_area;
    if w.conf != 0.0 {
        total += w.conf * e_conf;
    }
    Ok(EnergyBreakdown {
        e_diri: fwd.e_diri,
        e_surf,
        e_area,
        e_conf,
        total,
    })
}

/// `dE/dpsi_i` of `E_diri + w.surf E_surf + w.area E_area`. The adjoint
/// fields use acceptance parameter `beta`.
pub fn psi_gradient(
    cloud: &PointCloud,
    grid: &EnergyGrid,
    baseline: &StageBaseline,
    fwd: &ForwardPass,
    w: &TermWeights,
    ev: &WindingEvaluator,
    beta: f64,
) -> Vec<f64> {
    let n = cloud.len();
    let scale = 2.0 * grid.voxel_volume;
    let v: Vec<Vec3> = grid
        .weights
        .iter()
        .zip(&fwd.grad_w)
        .map(|(d, g)| g * (scale * d))
        .collect();
    let adjoint = (!grid.is_empty()).then(|| DipoleField::new(grid.tree().clone(), &v, beta));

    let surf = (w.surf != 0.0 && !grid.high_conf.is_empty()).then(|| {
        let mut charges = vec![0.0; n];
        let k = 2.0 / grid.high_conf.len() as f64;
        for (&j, wj) in grid.high_conf.iter().zip(&fwd.w_surf) {
            charges[j] = k * (wj - 0.5);
        }
        ChargeField::new(ev.tree().clone(), &charges, beta)
    });

    let area = w.area * sign0(cloud.effective_sum() - baseline.effective_sum);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let p = cloud.positions()[i];
            let ni = cloud.normals()[i];
            let mut g = area;
            if let Some(field) = &adjoint {
                g += ni.dot(&field.gradient(&p, None, 0.0));
            }
            if let Some(field) = &surf {
                g += w.surf * ni.dot(&field.field(&p, Some(i)));
            }
            g
        })
        .collect()
}

/// Value of `E_diri + l1 E_surf + l2 E_area`.
pub fn objective_area(
    cloud: &PointCloud,
    grid: &EnergyGrid,
    baseline: &StageBaseline,
    l1: f64,
    l2: f64,
    ev: &WindingEvaluator,
) -> Result<EnergyBreakdown> {
    let fwd = forward(cloud, grid, ev)?;
    breakdown(cloud, baseline, &fwd, &TermWeights::area_stage(l1, l2))
}

/// Value of `E_diri + l3 E_surf + l4 E_area + l5 E_conf`.
#[allow(clippy::too_many_arguments)]
pub fn objective_conf(
    cloud: &PointCloud,
    grid: &EnergyGrid,
    baseline: &StageBaseline,
    l3: f64,
    l4: f64,
    l5: f64,
    ev: &WindingEvaluator,
) -> Result<EnergyBreakdown> {
    let fwd = forward(cloud, grid, ev)?;
    breakdown(cloud, baseline, &fwd, &TermWeights::conf_stage(l3, l4, l5))
}

/// Objective value and its gradient in one forward/adjoint pass. Returns
/// `(breakdown, d/da, d/dc)`.
pub fn evaluate(
    cloud: &PointCloud,
    grid: &EnergyGrid,
    baseline: &StageBaseline,
    w: &TermWeights,
    ev: &WindingEvaluator,
) -> Result<(EnergyBreakdown, Vec<f64>, Vec<f64>)> {
    evaluate_with(cloud, grid, baseline, w, ev, ev.beta())
}

/// [`evaluate`] with a separate acceptance parameter for the adjoint fields,
/// which only shape the descent direction.
pub fn evaluate_with(
    cloud: &PointCloud,
    grid: &EnergyGrid,
    baseline: &StageBaseline,
    w: &TermWeights,
    ev: &WindingEvaluator,
    adjoint_beta: f64,
) -> Result<(EnergyBreakdown, Vec<f64>, Vec<f64>)> {
    let fwd = forward(cloud, grid, ev)?;
    let e = breakdown(cloud, baseline, &fwd, w)?;
    let dpsi = psi_gradient(cloud, grid, baseline, &fwd, w, ev, adjoint_beta);
    let a = cloud.area_weights();
    let c = cloud.confidences();
    let da = dpsi.iter().zip(c).map(|(g, ci)| g * ci).collect();
    let dc = dpsi
        .iter()
        .zip(a)
        .zip(c)
        .map(|((g, ai), ci)| g * ai + w.conf * (1.0 - 2.0 * ci))
        .collect();
    Ok((e, da, dc))
}

pub fn grad_area(
    cloud: &PointCloud,
    grid: &EnergyGrid,
    baseline: &StageBaseline,
    l1: f64,
    l2: f64,
    ev: &WindingEvaluator,
) -> Result<Vec<f64>> {
    evaluate(cloud, grid, baseline, &TermWeights::area_stage(l1, l2), ev).map(|(_, da, _)| da)
}

#[allow(clippy::too_many_arguments)]
pub fn grad_conf(
    cloud: &PointCloud,
    grid: &EnergyGrid,
    baseline: &StageBaseline,
    l3: f64,
    l4: f64,
    l5: f64,
    ev: &WindingEvaluator,
) -> Result<Vec<f64>> {
    evaluate(
        cloud,
        grid,
        baseline,
        &TermWeights::conf_stage(l3, l4, l5),
        ev,
    )
    .map(|(_, _, dc)| dc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy_grid::{build_grid, GridParams};
    use crate::shapes::{random_unit, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = (0..n)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let nrm = (0..n).map(|_| random_unit(&mut rng)).collect();
        let a = (0..n).map(|_| 0.01 + 0.05 * rng.random::<f64>()).collect();
        let c = (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    0.9 + 0.1 * rng.random::<f64>()
                } else {
                    rng.random()
                }
            })
            .collect();
        PointCloud::with_state(pos, nrm, a, c).unwrap()
    }

    fn grid_for(cloud: &PointCloud, res: usize) -> EnergyGrid {
        grid_with(cloud, res, 0.9)
    }

    fn grid_with(cloud: &PointCloud, res: usize, tau_in: f64) -> EnergyGrid {
        build_grid(
            cloud,
            &GridParams {
                resolution: res,
                box_margin: 0.1,
                r_s: 0.03,
                tau_in,
            },
        )
    }

    #[test]
    fn trivial_term_values() {
        let cloud = PointCloud::with_state(
            vec![Vec3::zeros(), Vec3::x()],
            vec![Vec3::z(); 2],
            vec![1.0, 1.0],
            vec![1.0, 0.5],
        )
        .unwrap();
        let mut base = StageBaseline::capture(&cloud);
        assert_eq!(area_energy(&cloud, &base), 0.0);
        base.effective_sum = 2.0;
        assert!((area_energy(&cloud, &base) - 0.5).abs() < 1e-15);

        let mut c = cloud.clone();
        c.set_confidences(vec![0.25, 0.75]);
        assert!((conf_energy(&c) - 0.375).abs() < 1e-15);
        c.set_confidences(vec![0.0, 1.0]);
        assert_eq!(conf_energy(&c), 0.0);
        c.set_confidences(vec![0.5, 0.5]);
        assert!((conf_energy(&c) - 0.5).abs() < 1e-15);

        assert!((surface_from_values(&[0.4, 0.7]).unwrap() - 0.025).abs() < 1e-15);
        assert!((surface_from_values(&[1.0]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(surface_from_values(&[0.5, 0.5]).unwrap(), 0.0);
        assert!(surface_from_values(&[]).is_none());
    }

    #[test]
    fn doubling_area_gives_baseline_deviation() {
        let cloud = random_cloud(20, 1);
        let base = StageBaseline::capture(&cloud);
        let mut doubled = cloud.clone();
        for a in doubled.area_weights_mut() {
            *a *= 2.0;
        }
        assert!((area_energy(&doubled, &base) - base.effective_sum).abs() < 1e-12);
    }

    #[test]
    fn zero_field_energies() {
        let mut cloud = random_cloud(30, 2);
        let grid = grid_for(&cloud, 8);
        cloud.set_confidences(vec![0.0; 30]);
        let ev = WindingEvaluator::new(&cloud, 2.0);
        assert_eq!(dirichlet_energy(&grid, &ev), 0.0);
        let base = StageBaseline::capture(&cloud);
        let e = objective_area(&cloud, &grid, &base, 3.0, 1.0, &ev).unwrap();
        assert_eq!(e.e_diri, 0.0);
        assert!((e.total - 3.0 * 0.25).abs() < 1e-12);
        let da = grad_area(&cloud, &grid, &base, 5.0, 1.0, &ev).unwrap();
        assert!(da.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_dipole_energy_positive() {
        let cloud = PointCloud::with_state(
            vec![Vec3::repeat(0.5)],
            vec![Vec3::z()],
            vec![0.1],
            vec![0.5],
        )
        .unwrap();
        let grid = grid_for(&cloud, 16);
        let ev = WindingEvaluator::new(&cloud, 2.0);
        assert!(dirichlet_energy(&grid, &ev) > 0.0);
    }

    #[test]
    fn empty_high_confidence_set_is_an_error() {
        let mut cloud = random_cloud(10, 3);
        cloud.set_confidences(vec![0.5; 10]);
        let grid = grid_for(&cloud, 8);
        let ev = WindingEvaluator::new(&cloud, 2.0);
        assert!(matches!(
            surface_energy(&ev, &grid.high_conf),
            Err(DiwrError::EmptyHighConfidenceSet)
        ));
        let base = StageBaseline::capture(&cloud);
        assert!(objective_area(&cloud, &grid, &base, 1.0, 1.0, &ev).is_err());
    }

    #[test]
    fn totals_equal_component_sums() {
        let cloud = random_cloud(50, 4);
        let grid = grid_for(&cloud, 8);
        let ev = WindingEvaluator::new(&cloud, 2.0);
        let mut base = StageBaseline::capture(&cloud);
        base.effective_sum *= 1.1;
        let e = objective_conf(&cloud, &grid, &base, 1.0, 0.5, 5e-3, &ev).unwrap();
        let d = dirichlet_energy(&grid, &ev);
        let s = surface_energy(&ev, &grid.high_conf).unwrap();
        let a = area_energy(&cloud, &base);
        let c = conf_energy(&cloud);
        let expect = d + 1.0 * s + 0.5 * a + 5e-3 * c;
        assert!((e.total - expect).abs() <= 1e-12 * expect.abs());
        let e0 = objective_area(&cloud, &grid, &base, 0.0, 0.0, &ev).unwrap();
        assert_eq!(e0.total, e0.e_diri);
    }

    #[test]
    fn dirichlet_energy_sign_invariant() {
        let cloud = random_cloud(40, 5);
        let grid = grid_for(&cloud, 8);
        let e1 = dirichlet_energy(&grid, &WindingEvaluator::new(&cloud, 2.0));
        let mut flipped = cloud.clone();
        for n in flipped.normals_mut() {
            *n = -*n;
        }
        let e2 = dirichlet_energy(&grid, &WindingEvaluator::new(&flipped, 2.0));
        assert!((e1 - e2).abs() <= 1e-12 * e1);
    }

    fn objective(
        cloud: &PointCloud,
        grid: &EnergyGrid,
        base: &StageBaseline,
        w: &TermWeights,
    ) -> f64 {
        let ev = WindingEvaluator::new(cloud, 0.0);
        let fwd = forward(cloud, grid, &ev).unwrap();
        breakdown(cloud, base, &fwd, w).unwrap().total
    }

    fn check_fd(seed: u64, w: TermWeights) {
        let cloud = random_cloud(50, seed);
        // Every point excluded from the sample set keeps the objective O(1), so
        // central differences are not swamped by rounding.
        let grid = grid_with(&cloud, 8, 0.0);
        let mut base = StageBaseline::capture(&cloud);
        base.effective_sum *= 0.9;
        let ev = WindingEvaluator::new(&cloud, 0.0);
        let (_, da, dc) = evaluate(&cloud, &grid, &base, &w, &ev).unwrap();
        // Each term is quadratic in a single a_i or c_i (the area term is linear
        // away from its kink), so central differences are exact up to rounding
        // and a moderate step keeps rounding below the tolerance.
        let h = 1e-4;
        for i in 0..cloud.len() {
            for (which, analytic) in [(0, da[i]), (1, dc[i])] {
                let mut plus = cloud.clone();
                let mut minus = cloud.clone();
                if which == 0 {
                    plus.area_weights_mut()[i] += h;
                    minus.area_weights_mut()[i] -= h;
                } else {
                    plus.confidences_mut()[i] += h;
                    minus.confidences_mut()[i] -= h;
                }
                let fd = (objective(&plus, &grid, &base, &w) - objective(&minus, &grid, &base, &w))
                    / (2.0 * h);
                if analytic.abs() > 1e-8 || fd.abs() > 1e-8 {
                    let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
                    assert!(
                        rel < 1e-4,
                        "seed {seed} point {i} var {which}: {analytic} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            check_fd(100 + seed, TermWeights::area_stage(5.0, 1.0));
            check_fd(200 + seed, TermWeights::conf_stage(1.0, 0.5, 5e-3));
        }
    }

    #[test]
    fn single_point_area_subgradient() {
        let cloud = PointCloud::with_state(
            vec![Vec3::repeat(0.5)],
            vec![Vec3::z()],
            vec![2.0],
            vec![0.5],
        )
        .unwrap();
        let grid = grid_for(&cloud, 8);
        let ev = WindingEvaluator::new(&cloud, 0.0);
        let mut base = StageBaseline::capture(&cloud);
        base.effective_sum = 0.3;
        let w = TermWeights::area_stage(0.0, 1.0);
        let fwd = forward(&cloud, &grid, &ev).unwrap();
        let dpsi = psi_gradient(&cloud, &grid, &base, &fwd, &w, &ev, 0.0);
        let zero_area = psi_gradient(
            &cloud,
            &grid,
            &base,
            &fwd,
            &TermWeights::area_stage(0.0, 0.0),
            &ev,
            0.0,
        );
        // sign(1.0 - 0.3) * c
        assert!(((dpsi[0] - zero_area[0]) * 0.5 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_sum_matches_monte_carlo_integral() {
        // Uniform +z normals give a smooth exterior field; with closed-surface
        // normals the energy is pure sampling noise concentrated at the band
        // edge, where centre-point quadrature is least accurate.
        for (npts, radius, r_s) in [(1000, 0.3, 0.1), (5000, 0.45, 0.03)] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let sphere = Shape::Sphere {
                center: Vec3::repeat(0.5),
                radius,
            };
            let mut cloud = sphere.sample_cloud(npts, &mut rng);
            cloud.set_normals(vec![Vec3::z(); npts]);
            let params = GridParams {
                resolution: 16,
                box_margin: 0.1,
                r_s,
                tau_in: 0.9,
            };
            let grid = build_grid(&cloud, &params);
            let ev = WindingEvaluator::new(&cloud, 2.0);
            let discrete = dirichlet_energy(&grid, &ev);

            let index = crate::spatial::KdTree::build(cloud.positions());
            let n = 1_000_000;
            let side = grid.bbox.side;
            let samples: Vec<Vec3> = (0..n)
                .map(|_| grid.bbox.min + Vec3::new(rng.random(), rng.random(), rng.random()) * side)
                .collect();
            let sum: f64 = samples
                .par_iter()
                .map(|q| {
                    if index.nearest(q).unwrap().dist2 < params.r_s * params.r_s {
                        0.0
                    } else {
                        ev.grad(q).norm_squared()
                    }
                })
                .sum();
            let mc = sum / n as f64 * side.powi(3);
            let rel = (discrete - mc).abs() / mc;
            assert!(
                rel < 0.10,
                "{npts} points: discrete {discrete} vs monte carlo {mc} ({rel})"
            );
        }
    }
}
