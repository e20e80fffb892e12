//! Staged optimization: normal updates alternate with area-weight stages
//! until the weights stabilise, then a confidence stage runs; the outer loop
//! repeats until the normals stop changing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::confidence::{compute_densities, reset_confidences, ConfidenceResetReport};
use crate::energies::{evaluate_with, objective_area, EnergyBreakdown, StageBaseline, TermWeights};
use crate::energy_grid::{build_grid, EnergyGrid, GridParams};
use crate::error::{DiwrError, Result};
use crate::metrics::{quality_measures, QualityReport, DEFAULT_K, DEFAULT_TRIM};
use crate::orientation::{normal_change, update_normals, OrientationUpdateConfig};
use crate::pcio::{save_points, PointCloud, PointFormat};
use crate::winding::{SourceTree, WindingEvaluator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmsPropConfig {
    /// Step size for `a`, in units of the stage's mean baseline weight.
    pub learning_rate_a: f64,
    pub learning_rate_c: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            learning_rate_a: 0.01,
            learning_rate_c: 0.01,
            decay: 0.9,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Auto,
    Easy,
    Severe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    /// Surface and area weights of the area stage, then surface, area and
    /// confidence weights of the confidence stage.
    pub lambdas: [f64; 5],
    pub eps_a: f64,
    pub eps_n: f64,
    pub t_max: usize,
    pub tau_in: f64,
    pub r_s: f64,
    pub r_rho: f64,
    pub grid_resolution: usize,
    pub box_margin: f64,
    pub beta: f64,
    /// Acceptance parameter of the adjoint fields behind the gradients.
    pub adjoint_beta: f64,
    pub rmsprop: RmsPropConfig,
    /// Multiplicative growth of every lambda per outer iteration.
    pub lambda_growth: f64,
    /// Cap on the accumulated growth factor.
    pub lambda_cap: f64,
    pub max_inner_steps_a: usize,
    pub max_inner_steps_c: usize,
    /// Cap on {normal update; area stage} rounds per outer iteration.
    pub max_area_rounds: usize,
    /// Inner stages stop when the objective changes by less than this
    /// (relative) over `early_exit_window` steps.
    pub early_exit_tol: f64,
    pub early_exit_window: usize,
    /// `Auto` picks the regime from the input's quality measures; `Severe`
    /// halves the lambdas.
    pub severity: Severity,
    pub orientation: OrientationUpdateConfig,
    /// Run the coarse orientation phase on the first normal update.
    pub reorient_first: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lambdas: [5.0, 1.0, 1.0, 0.5, 5e-3],
            eps_a: 0.15,
            eps_n: 0.02,
            t_max: 10,
            tau_in: 0.9,
            r_s: 0.03,
            r_rho: 0.06,
            grid_resolution: 64,
            box_margin: 0.1,
            beta: 2.0,
            adjoint_beta: 1.2,
            rmsprop: RmsPropConfig::default(),
            lambda_growth: 1.25,
            lambda_cap: 4.0,
            max_inner_steps_a: 200,
            max_inner_steps_c: 200,
            max_area_rounds: 5,
            early_exit_tol: 1e-5,
            early_exit_window: 10,
            severity: Severity::Auto,
            orientation: OrientationUpdateConfig::default(),
            reorient_first: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DiwrError::InvalidConfig(m.to_string()));
        if self.lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return bad("lambdas must be positive");
        }
        for (name, v) in [
            ("eps_a", self.eps_a),
            ("eps_n", self.eps_n),
            ("r_s", self.r_s),
            ("r_rho", self.r_rho),
            ("box_margin", self.box_margin),
            ("learning_rate_a", self.rmsprop.learning_rate_a),
            ("learning_rate_c", self.rmsprop.learning_rate_c),
            ("epsilon", self.rmsprop.epsilon),
            ("early_exit_tol", self.early_exit_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(self.tau_in > 0.0 && self.tau_in <= 1.0) {
            return bad("tau_in must lie in (0, 1]");
        }
        if self.t_max < 1 {
            return bad("t_max must be >= 1");
        }
        if self.grid_resolution < 2 {
            return bad("grid_resolution must be >= 2");
        }
        if !(self.beta >= 0.0 && self.adjoint_beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(self.rmsprop.decay > 0.0 && self.rmsprop.decay < 1.0) {
            return bad("rmsprop decay must lie in (0, 1)");
        }
        if !(self.lambda_growth >= 1.0 && self.lambda_cap >= 1.0) {
            return bad("lambda growth and cap must be >= 1");
        }
        if self.max_area_rounds < 1 || self.early_exit_window < 1 {
            return bad("max_area_rounds and early_exit_window must be >= 1");
        }
        self.orientation.validate()
    }

    pub fn grid_params(&self) -> GridParams {
        GridParams {
            resolution: self.grid_resolution,
            box_margin: self.box_margin,
            r_s: self.r_s,
            tau_in: self.tau_in,
        }
    }

    /// Lambdas of outer iteration `t` for the chosen regime.
    pub fn lambdas_at(&self, t: usize, severe: bool) -> [f64; 5] {
        let growth = self.lambda_growth.powi(t as i32).min(self.lambda_cap);
        let base = if severe { 0.5 } else { 1.0 };
        self.lambdas.map(|l| l * base * growth)
    }
}

/// One RMSProp update with projection onto `[lower, upper]`.
#[allow(clippy::too_many_arguments)]
pub fn rmsprop_step(
    values: &[f64],
    grads: &[f64],
    moments: &[f64],
    lr: f64,
    decay: f64,
    eps: f64,
    lower: f64,
    upper: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert!(values.len() == grads.len() && values.len() == moments.len());
    values
        .iter()
        .zip(grads)
        .zip(moments)
        .map(|((&v, &g), &m)| {
            let m = decay * m + (1.0 - decay) * g * g;
            let step = if g == 0.0 { 0.0 } else { lr * g / (m + eps).sqrt() };
            ((v - step).clamp(lower, upper), m)
        })
        .unzip()
}

/// `(1/n) sum |(a_i - b_i) / b_i|` over points with `b_i != 0`; the count is
/// the number of all points.
pub fn relative_area_change(a: &[f64], baseline: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter()
        .zip(baseline)
        .filter(|(_, b)| **b != 0.0)
        .map(|(x, b)| ((x - b) / b).abs())
        .sum::<f64>()
        / a.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub t: usize,
    pub stage: String,
    pub e_diri: f64,
    pub e_surf: f64,
    pub e_area: f64,
    pub e_conf: f64,
    pub total: f64,
    pub delta_a: Option<f64>,
    pub delta_n: Option<f64>,
    pub steps: usize,
    /// Share of steps that did not increase the objective.
    pub monotone_fraction: Option<f64>,
    pub high_conf_count: usize,
    pub wallclock_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub start: EnergyBreakdown,
    pub end: EnergyBreakdown,
    pub steps: usize,
    pub monotone_fraction: f64,
    /// Relative area change (area stages only).
    pub delta_a: Option<f64>,
    pub reset: Option<ConfidenceResetReport>,
}

/// Mutable state of a run: the parameters, the sample grid, optimizer
/// accumulators and the log.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub t: usize,
    pub cloud: PointCloud,
    pub baseline: Option<StageBaseline>,
    pub moments_a: Vec<f64>,
    pub moments_c: Vec<f64>,
    pub log: Vec<LogEntry>,
    pub delta_a_history: Vec<f64>,
    pub delta_n_history: Vec<f64>,
    pub lambdas: [f64; 5],
    pub severe: bool,
    pub quality: Option<QualityReport>,
    pub grid: EnergyGrid,
    pub tree: Arc<SourceTree>,
    started: Instant,
}

impl OptimizerState {
    /// Prepares a run: densities, severity regime, tree and grid.
    pub fn new(mut cloud: PointCloud, cfg: &OptimConfig) -> Result<Self> {
        cfg.validate()?;
        if cloud.is_empty() {
            return Err(DiwrError::EmptyInput);
        }
        cloud.set_densities(compute_densities(&cloud, cfg.r_rho));
        let (severe, quality) = match cfg.severity {
            Severity::Easy => (false, None),
            Severity::Severe => (true, None),
            Severity::Auto => match quality_measures(&cloud, DEFAULT_K, DEFAULT_TRIM) {
                Ok(q) => (!q.is_easy(), Some(q)),
                Err(e) => {
                    warn!("quality measures unavailable ({e}); using the easy regime");
                    (false, None)
                }
            },
        };
        let tree = Arc::new(SourceTree::build(cloud.positions()));
        let grid = build_grid(&cloud, &cfg.grid_params());
        let n = cloud.len();
        Ok(OptimizerState {
            t: 0,
            baseline: None,
            moments_a: vec![0.0; n],
            moments_c: vec![0.0; n],
            log: Vec::new(),
            delta_a_history: Vec::new(),
            delta_n_history: Vec::new(),
            lambdas: cfg.lambdas_at(0, severe),
            severe,
            quality,
            grid,
            tree,
            cloud,
            started: Instant::now(),
        })
    }

    pub fn evaluator(&self, beta: f64) -> WindingEvaluator {
        WindingEvaluator::with_tree(self.tree.clone(), &self.cloud, beta)
    }

    pub fn rebuild_grid(&mut self, cfg: &OptimConfig) {
        self.grid = build_grid(&self.cloud, &cfg.grid_params());
    }

    /// Area-stage objective at the current state, without gradients.
    fn area_objective(&self, cfg: &OptimConfig) -> Result<EnergyBreakdown> {
        let baseline = StageBaseline::capture(&self.cloud);
        let [l1, l2, ..] = self.lambdas;
        objective_area(&self.cloud, &self.grid, &baseline, l1, l2, &self.evaluator(cfg.beta))
    }

    fn record(&mut self, stage: &str, e: &EnergyBreakdown, extra: (Option<f64>, Option<f64>, usize, Option<f64>)) {
        let entry = LogEntry {
            t: self.t,
            stage: stage.to_string(),
            e_diri: e.e_diri,
            e_surf: e.e_surf,
            e_area: e.e_area,
            e_conf: e.e_conf,
            total: e.total,
            delta_a: extra.0,
            delta_n: extra.1,
            steps: extra.2,
            monotone_fraction: extra.3,
            high_conf_count: self.grid.high_conf.len(),
            wallclock_ms: self.started.elapsed().as_millis(),
        };
        debug!(?entry, "stage finished");
        self.log.push(entry);
    }

    fn non_finite(&self, stage: &str) -> DiwrError {
        DiwrError::NonFiniteEnergy {
            iteration: self.t,
            stage: stage.to_string(),
        }
    }
}

enum Variable {
    Area,
    Confidence,
}

/// Projected RMSProp on one variable with early exit. Returns the stage
/// report without `delta_a`/`reset`.
fn descend(state: &mut OptimizerState, cfg: &OptimConfig, var: Variable, weights: TermWeights) -> Result<StageReport> {
    let baseline = StageBaseline::capture(&state.cloud);
    state.baseline = Some(baseline.clone());
    let (stage, max_steps) = match var {
        Variable::Area => ("area", cfg.max_inner_steps_a),
        Variable::Confidence => ("conf", cfg.max_inner_steps_c),
    };
    let lr = match var {
        Variable::Area => {
            let positive: Vec<f64> = baseline.a_baseline.iter().copied().filter(|a| *a > 0.0).collect();
            let scale = if positive.is_empty() {
                1.0
            } else {
                positive.iter().sum::<f64>() / positive.len() as f64
            };
            cfg.rmsprop.learning_rate_a * scale
        }
        Variable::Confidence => cfg.rmsprop.learning_rate_c,
    };
    let mut history: Vec<f64> = Vec::with_capacity(max_steps + 1);
    let mut start = None;
    let mut end = EnergyBreakdown::default();
    let mut steps = 0;
    for step in 0..=max_steps {
        let ev = state.evaluator(cfg.beta);
        let (e, da, dc) = evaluate_with(&state.cloud, &state.grid, &baseline, &weights, &ev, cfg.adjoint_beta)?;
        if !e.is_finite() {
            return Err(state.non_finite(stage));
        }
        start.get_or_insert(e);
        end = e;
        history.push(e.total);
        if step == max_steps {
            break;
        }
        let w = cfg.early_exit_window;
        if history.len() > w {
            let (old, new) = (history[history.len() - 1 - w], e.total);
            if (old - new).abs() <= cfg.early_exit_tol * new.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        }
        let (grads, values, moments, upper) = match var {
            Variable::Area => (da, state.cloud.area_weights(), &state.moments_a, f64::INFINITY),
            Variable::Confidence => (dc, state.cloud.confidences(), &state.moments_c, 1.0),
        };
        if grads.iter().all(|g| *g == 0.0) {
            break;
        }
        let (v, m) = rmsprop_step(values, &grads, moments, lr, cfg.rmsprop.decay, cfg.rmsprop.epsilon, 0.0, upper);
        match var {
            Variable::Area => {
                state.cloud.set_area_weights(v);
                state.moments_a = m;
            }
            Variable::Confidence => {
                state.cloud.set_confidences(v);
                state.moments_c = m;
            }
        }
        steps += 1;
    }
    let monotone = if history.len() > 1 {
        history.windows(2).filter(|p| p[1] <= p[0]).count() as f64 / (history.len() - 1) as f64
    } else {
        1.0
    };
    if monotone < 0.9 {
        debug!(stage, monotone, "objective not monotone on 90% of steps");
    }
    Ok(StageReport {
        start: start.expect("at least one evaluation"),
        end,
        steps,
        monotone_fraction: monotone,
        delta_a: None,
        reset: None,
    })
}

/// Area-weight stage; records the relative area change.
pub fn optimize_area_stage(state: &mut OptimizerState, cfg: &OptimConfig) -> Result<StageReport> {
    let [l1, l2, ..] = state.lambdas;
    let mut report = descend(state, cfg, Variable::Area, TermWeights::area_stage(l1, l2))?;
    let baseline = state.baseline.as_ref().expect("captured by descend");
    let delta_a = relative_area_change(state.cloud.area_weights(), &baseline.a_baseline);
    report.delta_a = Some(delta_a);
    state.delta_a_history.push(delta_a);
    let end = report.end;
    state.record("area", &end, (Some(delta_a), None, report.steps, Some(report.monotone_fraction)));
    Ok(report)
}

/// Confidence stage: reset, rebuild the grid, descend, rebuild again.
pub fn optimize_conf_stage(state: &mut OptimizerState, cfg: &OptimConfig) -> Result<StageReport> {
    let [_, _, l3, l4, l5] = state.lambdas;
    let w = state.evaluator(cfg.beta).eval_at_points();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(state.non_finite("conf-reset"));
    }
    let (c, reset) = reset_confidences(&state.cloud, &w);
    state.cloud.set_confidences(c);
    state.rebuild_grid(cfg);
    let mut report = descend(state, cfg, Variable::Confidence, TermWeights::conf_stage(l3, l4, l5))?;
    state.rebuild_grid(cfg);
    report.reset = Some(reset);
    let end = report.end;
    state.record("conf", &end, (None, None, report.steps, Some(report.monotone_fraction)));
    Ok(report)
}

/// Optional run outputs.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    /// JSON-lines log, one entry per stage.
    pub log_path: Option<PathBuf>,
    /// Directory receiving one PLY state checkpoint per outer iteration.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
#[error("{error}")]
pub struct RunError {
    pub error: DiwrError,
    /// Log up to the failure.
    pub log: Vec<LogEntry>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub cloud: PointCloud,
    pub state: OptimizerState,
    pub iterations: usize,
    pub converged: bool,
}

pub fn run_diwr(cloud: PointCloud, cfg: &OptimConfig) -> std::result::Result<RunResult, RunError> {
    run_diwr_with(cloud, cfg, &RunOutputs::default())
}

pub fn run_diwr_with(cloud: PointCloud, cfg: &OptimConfig, outputs: &RunOutputs) -> std::result::Result<RunResult, RunError> {
    let mut state = OptimizerState::new(cloud, cfg).map_err(|error| RunError { error, log: Vec::new() })?;
    let mut log_file = None;
    let outcome = (|| -> Result<(usize, bool)> {
        if let Some(p) = &outputs.log_path {
            log_file = Some(BufWriter::new(File::create(p)?));
        }
        if let Some(d) = &outputs.checkpoint_dir {
            std::fs::create_dir_all(d)?;
        }
        run_loop(&mut state, cfg, outputs, &mut log_file)
    })();
    if let Some(f) = log_file.as_mut() {
        let _ = f.flush();
    }
    match outcome {
        Ok((iterations, converged)) => Ok(RunResult {
            cloud: state.cloud.clone(),
            state,
            iterations,
            converged,
        }),
        Err(error) => Err(RunError {
            error,
            log: state.log.clone(),
        }),
    }
}

fn flush_log(state: &OptimizerState, written: &mut usize, sink: &mut Option<BufWriter<File>>) -> Result<()> {
    if let Some(f) = sink.as_mut() {
        for entry in &state.log[*written..] {
            serde_json::to_writer(&mut *f, entry)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    *written = state.log.len();
    Ok(())
}

fn run_loop(
    state: &mut OptimizerState,
    cfg: &OptimConfig,
    outputs: &RunOutputs,
    sink: &mut Option<BufWriter<File>>,
) -> Result<(usize, bool)> {
    let mut written = 0;
    let probe_offset = 2.0 * cfg.r_s;
    for t in 0..cfg.t_max {
        state.t = t;
        state.lambdas = cfg.lambdas_at(t, state.severe);
        let start_normals = state.cloud.normals().to_vec();
        for round in 0..cfg.max_area_rounds {
            let global = cfg.reorient_first && t == 0 && round == 0;
            let (normals, rep) = update_normals(&state.cloud, &state.tree, cfg.beta, &cfg.orientation, global, probe_offset);
            state.cloud.set_normals(normals);
            let e = state.area_objective(cfg)?;
            if !e.is_finite() {
                return Err(state.non_finite("normals"));
            }
            state.record("normals", &e, (None, None, rep.sweeps, None));
            let area = optimize_area_stage(state, cfg)?;
            flush_log(state, &mut written, sink)?;
            if area.delta_a.unwrap_or(0.0) <= cfg.eps_a {
                break;
            }
        }
        optimize_conf_stage(state, cfg)?;
        let mask: Vec<bool> = state.cloud.confidences().iter().map(|c| *c >= cfg.tau_in).collect();
        let delta_n = normal_change(&start_normals, state.cloud.normals(), &mask)?;
        state.delta_n_history.push(delta_n);
        if let Some(last) = state.log.last_mut() {
            last.delta_n = Some(delta_n);
        }
        flush_log(state, &mut written, sink)?;
        if let Some(dir) = &outputs.checkpoint_dir {
            save_points(&dir.join(format!("theta_{t:03}.ply")), &state.cloud, PointFormat::Ply)?;
        }
        info!(t, delta_n, "outer iteration finished");
        if delta_n <= cfg.eps_n {
            return Ok((t + 1, true));
        }
    }
    Ok((cfg.t_max, false))
}
