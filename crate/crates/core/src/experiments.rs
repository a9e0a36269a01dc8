//! End-to-end experiment drivers shared by the CLI and the test suites.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ProblemConfig};
use crate::ensemble::{
    field_map, moment_maps, order_sweep, rate_sweep, run_ensemble, EnsembleRequest, EnsembleStats, MomentMap,
    OrderSweepResult, Peak, RateSweepConfig, RateSweepResult,
};
use crate::error::{Result, SarError};
use crate::integrators::{SarSystem, TruthCoeffs, DEFAULT_QUAD_POINTS};
use crate::io::{config_hash, write_columns, FileHeader};
use crate::spectral::ForwardProblem;
use crate::stopping::{
    a_priori_time, balance_time, beyond_resolution, discrepancy_chi1, discrepancy_chi2, StoppingOutcome,
    StoppingRule,
};

/// Result of a single stopped ensemble run.
#[derive(Clone, Debug)]
pub struct SolveReport {
    /// Absolute noise level `‖y^δ - y‖`.
    pub delta: f64,
    pub outcome: Option<StoppingOutcome>,
    pub t_end: f64,
    pub stats: EnsembleStats,
    pub y_delta: DVector<f64>,
    pub analytic_mean: DVector<f64>,
    pub analytic_variance: f64,
    /// `‖E x(t) - x†‖²` from the closed-form mean.
    pub analytic_bias_sq: Option<f64>,
    /// Fraction of nodes where `x†` lies inside each band.
    pub coverage: Vec<(f64, f64)>,
    /// `‖A x̄ - y^δ‖ / ‖y^δ‖` for the ensemble mean `x̄`.
    pub relative_residual: f64,
    pub beyond_resolution: bool,
}

/// Stopping time for the configured rule.
pub fn stopping_time(
    cfg: &ExperimentConfig,
    p: &ForwardProblem,
    sys: &SarSystem,
    delta: f64,
) -> Result<StoppingOutcome> {
    let opts = cfg.stop_options();
    match cfg.rule {
        StoppingRule::APriori => {
            let family = cfg
                .source
                .as_ref()
                .map(|s| s.family)
                .ok_or_else(|| SarError::config("the a priori rule needs a [source] family"))?;
            a_priori_time(family, delta, &opts)
        }
        StoppingRule::DiscrepancyChi1 => discrepancy_chi1(sys, delta, &opts),
        StoppingRule::DiscrepancyChi2 => discrepancy_chi2(sys, delta, &opts),
        StoppingRule::Balance => {
            let x0 = cfg.x0(p);
            let spec = cfg.build_spec(p)?;
            let exact = SarSystem::new(p, &spec, cfg.schedule, p.require_y_exact()?, &x0)?;
            let truth = TruthCoeffs::new(p, &x0)?;
            balance_time(&exact, &truth, delta, &opts)
        }
    }
}

/// Builds the problem and data, picks `t*` (or uses `t_end`), and runs the ensemble.
pub fn solve(cfg: &ExperimentConfig) -> Result<(ForwardProblem, SolveReport)> {
    cfg.validate()?;
    let p = cfg.build_problem()?;
    let report = solve_on(cfg, &p)?;
    Ok((p, report))
}

pub fn solve_on(cfg: &ExperimentConfig, p: &ForwardProblem) -> Result<SolveReport> {
    let spec = cfg.build_spec(p)?;
    let x0 = cfg.x0(p);
    let (delta, y) = cfg.build_data(p)?;
    let sys = SarSystem::new(p, &spec, cfg.schedule, &y, &x0)?;
    let (outcome, t_end) = match cfg.t_end {
        Some(t) => (None, t),
        None => {
            let o = stopping_time(cfg, p, &sys, delta)?;
            let t = o.t_star;
            (Some(o), t)
        }
    };
    let truth = p.x_true().map(|_| TruthCoeffs::new(p, &x0)).transpose()?;
    let req = EnsembleRequest {
        scheme: cfg.scheme,
        dt: cfg.dt,
        t_end,
        n_paths: cfg.n_paths,
        levels: cfg.levels.clone(),
        master_seed: cfg.master_seed,
        path_offset: 0,
    };
    let stats = run_ensemble(p, &sys, &req, truth.as_ref())?;
    let analytic_mean = sys.to_grid(p, &sys.mean_coeffs(t_end))?;
    let analytic_variance = sys.variance_trace(t_end, DEFAULT_QUAD_POINTS)?;
    let analytic_bias_sq = truth.as_ref().map(|t| sys.bias_sq(t_end, t));
    let coverage = match p.x_true() {
        Some(xt) => stats
            .bands
            .iter()
            .map(|b| {
                let inside = (0..xt.len()).filter(|&i| b.lower[i] <= xt[i] && xt[i] <= b.upper[i]).count();
                (b.level, inside as f64 / xt.len() as f64)
            })
            .collect(),
        None => Vec::new(),
    };
    let resid = p.apply_forward(&stats.mean)? - &y;
    let relative_residual = p.norm_range(&resid) / p.norm_range(&y);
    Ok(SolveReport {
        delta,
        outcome,
        t_end,
        beyond_resolution: beyond_resolution(&sys, t_end),
        stats,
        y_delta: y,
        analytic_mean,
        analytic_variance,
        analytic_bias_sq,
        coverage,
        relative_residual,
    })
}

fn header(cfg: &ExperimentConfig, report: &SolveReport) -> Result<FileHeader> {
    let mut h = FileHeader::new(cfg.master_seed, config_hash(cfg)?)
        .with("delta", format!("{:.17e}", report.delta))
        .with("t_end", format!("{:.17e}", report.t_end))
        .with("n_paths", report.stats.n_paths);
    if let Some(o) = &report.outcome {
        h = h.with("rule", o.rule.name()).with("evaluations", o.evaluations);
    }
    Ok(h)
}

/// Writes `solution.tsv`: grid, ensemble mean and variance, closed-form mean,
/// exact solution when known, and one lower/upper pair per band.
pub fn write_solution(cfg: &ExperimentConfig, p: &ForwardProblem, report: &SolveReport, dir: &Path) -> Result<PathBuf> {
    let path = dir.join("solution.tsv");
    let names: Vec<String> = report
        .stats
        .bands
        .iter()
        .flat_map(|b| {
            let pct = (b.level * 100.0).round() as u32;
            [format!("band{pct}_lower"), format!("band{pct}_upper")]
        })
        .collect();
    let mut cols: Vec<(&str, &[f64])> = vec![
        ("grid", p.grid_domain().as_slice()),
        ("mean", report.stats.mean.as_slice()),
        ("variance", report.stats.variance.as_slice()),
        ("analytic_mean", report.analytic_mean.as_slice()),
    ];
    if let Some(xt) = p.x_true() {
        cols.push(("x_true", xt.as_slice()));
    }
    for (k, b) in report.stats.bands.iter().enumerate() {
        cols.push((names[2 * k].as_str(), b.lower.as_slice()));
        cols.push((names[2 * k + 1].as_str(), b.upper.as_slice()));
    }
    write_columns(&path, &header(cfg, report)?, &cols)?;
    Ok(path)
}

/// Writes `moments.tsv` with the mean, sample variance, raw second moment and
/// third and fourth central moments per node.
pub fn write_moments(cfg: &ExperimentConfig, p: &ForwardProblem, report: &SolveReport, dir: &Path) -> Result<PathBuf> {
    let path = dir.join("moments.tsv");
    let s = &report.stats;
    write_columns(
        &path,
        &header(cfg, report)?,
        &[
            ("grid", p.grid_domain().as_slice()),
            ("mean", s.mean.as_slice()),
            ("variance", s.variance.as_slice()),
            ("raw_m2", s.raw_m2.as_slice()),
            ("central_m3", s.central_m3.as_slice()),
            ("central_m4", s.central_m4.as_slice()),
        ],
    )?;
    Ok(path)
}

/// Peak analysis of a 2-D rate-constant reconstruction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapReport {
    pub mean_peaks: Vec<Peak>,
    pub raw_m2_peaks: Vec<Peak>,
    pub variance_peaks: Vec<Peak>,
    pub truth_nodes: Vec<(usize, usize)>,
    /// For each truth node, the Chebyshev index distance to the nearest mean-map peak.
    pub truth_distance: Vec<Option<usize>>,
    /// Every truth peak has a mean-map peak within one grid cell.
    pub recovered: bool,
    pub relative_residual: f64,
}

/// Maps of the ensemble mean, raw second moment `E x²` and central moments.
pub fn moment_field_maps(report: &SolveReport) -> Result<(MomentMap, MomentMap, Vec<MomentMap>)> {
    let grid = report.stats.grid2d.as_ref();
    let mean = field_map(1, report.stats.mean.as_slice().to_vec(), grid);
    let raw = field_map(2, report.stats.raw_m2.as_slice().to_vec(), grid);
    let central = (2..=4).map(|k| moment_maps(&report.stats, k)).collect::<Result<_>>()?;
    Ok((mean, raw, central))
}

pub fn analyze_maps(cfg: &ExperimentConfig, report: &SolveReport) -> Result<MapReport> {
    let ProblemConfig::Biosensor { design, truth } = &cfg.problem else {
        return Err(SarError::Unsupported("map analysis needs the biosensor problem".into()));
    };
    let (mean, raw, central) = moment_field_maps(report)?;
    let truth_nodes = truth.peak_nodes(design);
    let truth_distance: Vec<Option<usize>> = truth_nodes
        .iter()
        .map(|&(a, b)| {
            mean.peaks
                .iter()
                .map(|pk| pk.cell.0.abs_diff(a).max(pk.cell.1.abs_diff(b)))
                .min()
        })
        .collect();
    Ok(MapReport {
        recovered: truth_distance.iter().all(|d| d.is_some_and(|d| d <= 1)),
        mean_peaks: mean.peaks,
        raw_m2_peaks: raw.peaks,
        variance_peaks: central[0].peaks.clone(),
        truth_nodes,
        truth_distance,
        relative_residual: report.relative_residual,
    })
}

/// Writes `biosensor_maps.tsv` over the rate grid.
pub fn write_maps(cfg: &ExperimentConfig, p: &ForwardProblem, report: &SolveReport, dir: &Path) -> Result<PathBuf> {
    let grid = p
        .grid2d()
        .ok_or_else(|| SarError::Unsupported("problem has no 2-D grid".into()))?;
    let (kd, ka): (Vec<f64>, Vec<f64>) = (0..grid.len()).map(|i| grid.coords(i)).unzip();
    let path = dir.join("biosensor_maps.tsv");
    let s = &report.stats;
    let mut cols: Vec<(&str, &[f64])> = vec![
        ("log10_kd", &kd),
        ("log10_ka", &ka),
        ("mean", s.mean.as_slice()),
        ("variance", s.variance.as_slice()),
        ("raw_m2", s.raw_m2.as_slice()),
        ("central_m3", s.central_m3.as_slice()),
        ("central_m4", s.central_m4.as_slice()),
    ];
    if let Some(xt) = p.x_true() {
        cols.push(("x_true", xt.as_slice()));
    }
    write_columns(&path, &header(cfg, report)?, &cols)?;
    Ok(path)
}

/// Rate sweep driven by the configuration's `[rates]` section; needs a
/// `[source]` family.
pub fn rates(cfg: &ExperimentConfig) -> Result<RateSweepResult> {
    cfg.validate()?;
    let family = cfg
        .source
        .as_ref()
        .map(|s| s.family)
        .ok_or_else(|| SarError::config("a rate sweep needs a [source] family"))?;
    let p = cfg.build_problem()?;
    let spec = cfg.build_spec(&p)?;
    let sweep = RateSweepConfig {
        family,
        rule: cfg.rule,
        stop: cfg.stop_options(),
        relative_deltas: cfg.rates.deltas.clone(),
        n_paths: cfg.n_paths,
        master_seed: cfg.master_seed,
        schedule: cfg.schedule,
        scheme: cfg.scheme,
        dt: cfg.dt,
        fixed_noise_direction: cfg.rates.fixed_noise_direction,
    };
    rate_sweep(&p, &spec, &cfg.x0(&p), &sweep)
}

/// Strong-order study driven by the configuration's `[order]` section.
pub fn order(cfg: &ExperimentConfig) -> Result<OrderSweepResult> {
    cfg.validate()?;
    let p = cfg.build_problem()?;
    let spec = cfg.build_spec(&p)?;
    let (_, y) = cfg.build_data(&p)?;
    let sys = SarSystem::new(&p, &spec, cfg.schedule, &y, &cfg.x0(&p))?;
    order_sweep(&sys, &cfg.order.dts(), cfg.order.t_end, cfg.n_paths, cfg.master_seed)
}
