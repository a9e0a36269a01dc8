//! Path ensembles, their statistics, and the experiment harnesses built on
//! top of them.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Result, SarError};
use crate::integrators::{NoiseSchedule, SarSystem, Scheme, TruthCoeffs, DEFAULT_QUAD_POINTS};
use crate::noise::{absolute_delta, inject_data_noise, least_squares_slope, QWienerSpec, RngLineage};
use crate::spectral::{ForwardProblem, Grid2d, SourceFamily};
use crate::stopping::{
    a_priori_time, balance_time, beyond_resolution, discrepancy_chi1, discrepancy_chi2, StopOptions,
    StoppingOutcome, StoppingRule,
};

/// Paths per work unit. Fixed so that the reduction tree, and therefore every
/// floating-point result, does not depend on the number of worker threads.
const CHUNK: usize = 64;

/// Single-pass central moments up to order four for a vector of nodes,
/// mergeable across partial ensembles.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentAccumulator {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    m3: Vec<f64>,
    m4: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim], m3: vec![0.0; dim], m4: vec![0.0; dim] }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.dim(), "sample length");
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let delta = x[i] - self.mean[i];
            let dn = delta / n;
            let dn2 = dn * dn;
            let term1 = delta * dn * n1;
            self.mean[i] += dn;
            self.m4[i] += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2[i] - 4.0 * dn * self.m3[i];
            self.m3[i] += term1 * dn * (n - 2.0) - 3.0 * dn * self.m2[i];
            self.m2[i] += term1;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(other.dim(), self.dim(), "accumulator dimension");
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for i in 0..self.dim() {
            let d = other.mean[i] - self.mean[i];
            let d2 = d * d;
            let (a2, b2, a3, b3) = (self.m2[i], other.m2[i], self.m3[i], other.m3[i]);
            self.m4[i] += other.m4[i]
                + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
                + 6.0 * d2 * (na * na * b2 + nb * nb * a2) / (n * n)
                + 4.0 * d * (na * b3 - nb * a3) / n;
            self.m3[i] += b3 + d2 * d * na * nb * (na - nb) / (n * n) + 3.0 * d * (na * b2 - nb * a2) / n;
            self.m2[i] += b2 + d2 * na * nb / n;
            self.mean[i] += d * nb / n;
        }
        self.n += other.n;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> Vec<f64> {
        let d = (self.n as f64 - 1.0).max(1.0);
        self.m2.iter().map(|m| (m / d).max(0.0)).collect()
    }

    /// Central moment `E (x - E x)^k` (population normalization), `k ∈ {2, 3, 4}`.
    pub fn central_moment(&self, k: usize) -> Option<Vec<f64>> {
        let n = self.n as f64;
        let src = match k {
            2 => &self.m2,
            3 => &self.m3,
            4 => &self.m4,
            _ => return None,
        };
        Some(src.iter().map(|m| m / n).collect())
    }

    /// Raw second moment `E x²`.
    pub fn raw_second_moment(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.mean.iter().zip(&self.m2).map(|(m, s)| m * m + s / n).collect()
    }
}

fn tree_merge(mut parts: Vec<MomentAccumulator>) -> Option<MomentAccumulator> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.merge(&b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop()
}

/// Pointwise band `[lower, upper]` holding the central `level` fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileBand {
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseEstimate {
    pub value: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug)]
pub struct EnsembleStats {
    pub n_paths: usize,
    pub excluded: usize,
    pub t_end: f64,
    pub scheme: Scheme,
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub central_m3: DVector<f64>,
    pub central_m4: DVector<f64>,
    pub raw_m2: DVector<f64>,
    pub bands: Vec<QuantileBand>,
    /// `E‖x - x†‖²` estimate when the truth is known.
    pub mse: Option<MseEstimate>,
    pub coeff_mean: Vec<f64>,
    pub coeff_variance: Vec<f64>,
    pub grid2d: Option<Grid2d>,
}

impl EnsembleStats {
    /// Estimate of `E‖x - E x‖²`.
    pub fn variance_trace(&self) -> f64 {
        self.coeff_variance.iter().sum()
    }

    pub fn band(&self, level: f64) -> Option<&QuantileBand> {
        self.bands.iter().find(|b| (b.level - level).abs() < 1e-12)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRequest {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    pub n_paths: usize,
    pub levels: Vec<f64>,
    pub master_seed: u64,
    /// Index of the first path; paths use lineages `path_offset..path_offset + n_paths`.
    pub path_offset: u64,
}

impl Default for EnsembleRequest {
    fn default() -> Self {
        Self {
            scheme: Scheme::ExactLaw,
            dt: 0.1,
            t_end: 1.0,
            n_paths: 1000,
            levels: vec![0.7, 0.85],
            master_seed: 0,
            path_offset: 0,
        }
    }
}

struct ChunkResult {
    coeffs: MomentAccumulator,
    grid: MomentAccumulator,
    errors: MomentAccumulator,
    values: Vec<Vec<f64>>,
    excluded: usize,
}

/// Runs `n_paths` independent paths to `t_end` and aggregates their
/// terminal states.
pub fn run_ensemble(
    p: &ForwardProblem,
    sys: &SarSystem,
    req: &EnsembleRequest,
    truth: Option<&TruthCoeffs>,
) -> Result<EnsembleStats> {
    if req.n_paths < 2 {
        return Err(SarError::config(format!("an ensemble needs at least 2 paths, got {}", req.n_paths)));
    }
    if let Some(l) = req.levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(SarError::config(format!("band level {l} is outside (0, 1)")));
    }
    if req.scheme != Scheme::ExactLaw {
        sys.check_dt(req.scheme, req.dt)?;
    }
    let law = match req.scheme {
        Scheme::ExactLaw => Some(sys.terminal_law(req.t_end, DEFAULT_QUAD_POINTS)?),
        _ => None,
    };
    let keep = !req.levels.is_empty();
    let (r, n) = (sys.rank(), p.domain_dim());
    let starts: Vec<usize> = (0..req.n_paths).step_by(CHUNK).collect();
    let chunks: Vec<Result<ChunkResult>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(req.n_paths);
            let mut out = ChunkResult {
                coeffs: MomentAccumulator::new(r),
                grid: MomentAccumulator::new(n),
                errors: MomentAccumulator::new(1),
                values: Vec::new(),
                excluded: 0,
            };
            for k in start..end {
                let lineage = RngLineage::new(req.master_seed, req.path_offset + k as u64);
                let coeffs = match &law {
                    Some(law) => law.sample(lineage),
                    None => match sys.run_path(req.scheme, req.dt, req.t_end, lineage) {
                        Ok(state) => state.coeffs,
                        Err(SarError::Numerical(_)) => {
                            out.excluded += 1;
                            continue;
                        }
                        Err(e) => return Err(e),
                    },
                };
                if coeffs.iter().any(|c| !c.is_finite()) {
                    out.excluded += 1;
                    continue;
                }
                let grid = sys.to_grid(p, &coeffs)?;
                out.coeffs.push(&coeffs);
                out.grid.push(grid.as_slice());
                if let Some(truth) = truth {
                    out.errors.push(&[truth.error_sq(&coeffs)]);
                }
                if keep {
                    out.values.push(grid.as_slice().to_vec());
                }
            }
            Ok(out)
        })
        .collect();
    let chunks: Vec<ChunkResult> = chunks.into_iter().collect::<Result<_>>()?;

    let excluded: usize = chunks.iter().map(|c| c.excluded).sum();
    if excluded as f64 > 1e-3 * req.n_paths as f64 {
        return Err(SarError::numerical(format!(
            "{excluded} of {} paths produced non-finite values",
            req.n_paths
        )));
    }
    let mut coeff_parts = Vec::with_capacity(chunks.len());
    let mut grid_parts = Vec::with_capacity(chunks.len());
    let mut err_parts = Vec::with_capacity(chunks.len());
    let mut values = Vec::new();
    for c in chunks {
        coeff_parts.push(c.coeffs);
        grid_parts.push(c.grid);
        err_parts.push(c.errors);
        values.extend(c.values);
    }
    let coeffs = tree_merge(coeff_parts).expect("at least one chunk");
    let grid = tree_merge(grid_parts).expect("at least one chunk");
    let errors = tree_merge(err_parts).expect("at least one chunk");
    let used = grid.count() as usize;
    if used < 2 {
        return Err(SarError::numerical("fewer than 2 usable paths"));
    }

    let bands = if keep { quantile_bands(&values, n, &req.levels) } else { Vec::new() };
    let mse = truth.map(|_| MseEstimate {
        value: errors.mean()[0],
        std_error: (errors.variance()[0] / used as f64).sqrt(),
    });
    let dv = |v: Vec<f64>| DVector::from_vec(v);
    Ok(EnsembleStats {
        n_paths: used,
        excluded,
        t_end: req.t_end,
        scheme: req.scheme,
        mean: DVector::from_column_slice(grid.mean()),
        variance: dv(grid.variance()),
        central_m3: dv(grid.central_moment(3).expect("order 3")),
        central_m4: dv(grid.central_moment(4).expect("order 4")),
        raw_m2: dv(grid.raw_second_moment()),
        bands,
        mse,
        coeff_mean: coeffs.mean().to_vec(),
        coeff_variance: coeffs.variance(),
        grid2d: p.grid2d().cloned(),
    })
}

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn quantile_bands(paths: &[Vec<f64>], n: usize, levels: &[f64]) -> Vec<QuantileBand> {
    let per_node: Vec<Vec<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut col: Vec<f64> = paths.iter().map(|p| p[i]).collect();
            col.sort_by(f64::total_cmp);
            levels
                .iter()
                .map(|l| (quantile_sorted(&col, (1.0 - l) / 2.0), quantile_sorted(&col, (1.0 + l) / 2.0)))
                .collect()
        })
        .collect();
    levels
        .iter()
        .enumerate()
        .map(|(k, &level)| QuantileBand {
            level,
            lower: per_node.iter().map(|v| v[k].0).collect(),
            upper: per_node.iter().map(|v| v[k].1).collect(),
        })
        .collect()
}

/// Least-squares slope with the half-width of its 95% confidence interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub half_width: f64,
}

pub fn fit_slope(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(SarError::config("slope fit needs at least 3 matching points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(SarError::numerical("slope fit on non-finite data"));
    }
    let pts: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    let (slope, intercept) = least_squares_slope(&pts);
    let n = pts.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sse: f64 = pts.iter().map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let se = (sse / (n - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 2.0)
        .map_err(|e| SarError::numerical(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(SlopeFit { slope, intercept, half_width: t * se })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSweepConfig {
    pub family: SourceFamily,
    pub rule: StoppingRule,
    pub stop: StopOptions,
    /// Relative noise levels `δ/‖y‖`, strictly decreasing.
    pub relative_deltas: Vec<f64>,
    pub n_paths: usize,
    pub master_seed: u64,
    pub schedule: NoiseSchedule,
    pub scheme: Scheme,
    pub dt: f64,
    /// Reuse one noise direction for every `δ` instead of fresh draws.
    pub fixed_noise_direction: bool,
}

impl Default for RateSweepConfig {
    fn default() -> Self {
        Self {
            family: SourceFamily::Holder { p: 0.5 },
            rule: StoppingRule::APriori,
            stop: StopOptions::default(),
            relative_deltas: vec![1e-2, 3e-3, 1e-3, 3e-4, 1e-4],
            n_paths: 500,
            master_seed: 0,
            schedule: NoiseSchedule::default(),
            scheme: Scheme::ExactLaw,
            dt: 0.1,
            fixed_noise_direction: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSweepResult {
    pub deltas: Vec<f64>,
    pub absolute_deltas: Vec<f64>,
    pub errors: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_stars: Vec<f64>,
    pub outcomes: Vec<StoppingOutcome>,
    /// Whether `t*` pushed the spectral window past the smallest resolved mode.
    pub beyond_resolution: Vec<bool>,
    /// Slope of `log E‖x(t*) - x†‖²` against `log δ`.
    pub mse_fit: SlopeFit,
    /// Slope of `log t*` against `log δ`.
    pub t_star_fit: SlopeFit,
    /// Slope of `log E‖x(t*) - x†‖²` against `log log(1/δ)`.
    pub loglog_fit: SlopeFit,
}

/// Convergence-rate experiment over a decreasing sequence of noise levels on
/// a problem whose exact solution is set.
pub fn rate_sweep(
    p: &ForwardProblem,
    spec: &QWienerSpec,
    x0: &DVector<f64>,
    cfg: &RateSweepConfig,
) -> Result<RateSweepResult> {
    let d = &cfg.relative_deltas;
    if d.len() < 4 {
        return Err(SarError::config("a rate sweep needs at least 4 noise levels"));
    }
    if d.iter().any(|v| !(v.is_finite() && *v > 0.0)) || d.windows(2).any(|w| w[1] >= w[0]) {
        return Err(SarError::config("noise levels must be positive and strictly decreasing"));
    }
    if d[0] / d[d.len() - 1] < 100.0 * (1.0 - 1e-12) {
        return Err(SarError::config("noise levels must span at least two decades"));
    }
    let truth = TruthCoeffs::new(p, x0)?;
    let mut out = RateSweepResult {
        deltas: d.clone(),
        absolute_deltas: Vec::new(),
        errors: Vec::new(),
        std_errors: Vec::new(),
        t_stars: Vec::new(),
        outcomes: Vec::new(),
        beyond_resolution: Vec::new(),
        mse_fit: SlopeFit { slope: f64::NAN, intercept: f64::NAN, half_width: f64::NAN },
        t_star_fit: SlopeFit { slope: f64::NAN, intercept: f64::NAN, half_width: f64::NAN },
        loglog_fit: SlopeFit { slope: f64::NAN, intercept: f64::NAN, half_width: f64::NAN },
    };
    let y_exact = p.require_y_exact()?.clone();
    for (i, &rel) in d.iter().enumerate() {
        let delta = absolute_delta(p, rel)?;
        let realization = if cfg.fixed_noise_direction { 0 } else { i as u64 };
        let y = inject_data_noise(p, delta, RngLineage::data_noise(cfg.master_seed, realization))?;
        let sys = SarSystem::new(p, spec, cfg.schedule, &y, x0)?;
        let wrap = |e: SarError| SarError::SweepStop { delta: rel, source: Box::new(e) };
        let outcome = match cfg.rule {
            StoppingRule::APriori => a_priori_time(cfg.family, delta, &cfg.stop),
            StoppingRule::DiscrepancyChi1 => discrepancy_chi1(&sys, delta, &cfg.stop),
            StoppingRule::DiscrepancyChi2 => discrepancy_chi2(&sys, delta, &cfg.stop),
            StoppingRule::Balance => {
                let exact = SarSystem::new(p, spec, cfg.schedule, &y_exact, x0)?;
                balance_time(&exact, &truth, delta, &cfg.stop)
            }
        }
        .map_err(wrap)?;
        let req = EnsembleRequest {
            scheme: cfg.scheme,
            dt: cfg.dt,
            t_end: outcome.t_star,
            n_paths: cfg.n_paths,
            levels: Vec::new(),
            master_seed: cfg.master_seed,
            path_offset: i as u64 * cfg.n_paths as u64,
        };
        let stats = run_ensemble(p, &sys, &req, Some(&truth))?;
        let mse = stats.mse.expect("truth supplied");
        out.absolute_deltas.push(delta);
        out.errors.push(mse.value);
        out.std_errors.push(mse.std_error);
        out.t_stars.push(outcome.t_star);
        out.beyond_resolution.push(beyond_resolution(&sys, outcome.t_star));
        out.outcomes.push(outcome);
    }
    let ld: Vec<f64> = d.iter().map(|v| v.ln()).collect();
    let le: Vec<f64> = out.errors.iter().map(|v| v.ln()).collect();
    let lt: Vec<f64> = out.t_stars.iter().map(|v| v.ln()).collect();
    let lld: Vec<f64> = out.absolute_deltas.iter().map(|v| (1.0 / v).ln().ln()).collect();
    out.mse_fit = fit_slope(&ld, &le)?;
    if out.t_stars.iter().all(|t| *t > 0.0) {
        out.t_star_fit = fit_slope(&ld, &lt)?;
    }
    if out.absolute_deltas.iter().all(|v| *v < 1.0 / std::f64::consts::E) {
        out.loglog_fit = fit_slope(&lld, &le)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderSweepResult {
    pub dts: Vec<f64>,
    /// Strong error `max_k √(E‖x_exact(t_k) - x_euler(t_k)‖²)`; `None` where
    /// the step violates the Euler stability bound.
    pub euler_errors: Vec<Option<f64>>,
    pub exp_euler_errors: Vec<f64>,
    pub euler_fit: Option<SlopeFit>,
    pub exp_euler_fit: Option<SlopeFit>,
}

/// Strong-error study against the coupled exact spectral scheme.
pub fn order_sweep(sys: &SarSystem, dts: &[f64], t_end: f64, n_paths: usize, master_seed: u64) -> Result<OrderSweepResult> {
    if dts.len() < 4 {
        return Err(SarError::config("an order sweep needs at least 4 step sizes"));
    }
    if dts.iter().any(|d| !(d.is_finite() && *d > 0.0)) || dts.windows(2).any(|w| w[1] >= w[0]) {
        return Err(SarError::config("step sizes must be positive and strictly decreasing"));
    }
    if n_paths < 2 {
        return Err(SarError::config("order sweep needs at least 2 paths"));
    }
    let mut euler_errors = Vec::new();
    let mut exp_errors = Vec::new();
    for &dt in dts {
        let euler_ok = sys.check_dt(Scheme::Euler, dt).is_ok();
        let (e_err, x_err) = strong_errors(sys, dt, t_end, n_paths, master_seed, euler_ok)?;
        euler_errors.push(euler_ok.then_some(e_err));
        exp_errors.push(x_err);
    }
    let fit = |errs: &[(f64, f64)]| -> Result<Option<SlopeFit>> {
        if errs.len() < 3 || errs.iter().any(|(_, e)| !(*e > 0.0)) {
            return Ok(None);
        }
        let x: Vec<f64> = errs.iter().map(|(d, _)| d.ln()).collect();
        let y: Vec<f64> = errs.iter().map(|(_, e)| e.ln()).collect();
        fit_slope(&x, &y).map(Some)
    };
    let e_pts: Vec<(f64, f64)> = dts.iter().zip(&euler_errors).filter_map(|(d, e)| e.map(|e| (*d, e))).collect();
    let x_pts: Vec<(f64, f64)> = dts.iter().copied().zip(exp_errors.iter().copied()).collect();
    Ok(OrderSweepResult {
        dts: dts.to_vec(),
        euler_fit: fit(&e_pts)?,
        exp_euler_fit: fit(&x_pts)?,
        euler_errors,
        exp_euler_errors: exp_errors,
    })
}

fn strong_errors(
    sys: &SarSystem,
    dt: f64,
    t_end: f64,
    n_paths: usize,
    master_seed: u64,
    with_euler: bool,
) -> Result<(f64, f64)> {
    let plan = SarSystem::step_plan(dt, t_end);
    let steps = plan.len();
    let starts: Vec<usize> = (0..n_paths).step_by(CHUNK).collect();
    let parts: Vec<Result<(Vec<f64>, Vec<f64>)>> = starts
        .par_iter()
        .map(|&start| {
            let mut e_sum = vec![0.0; steps];
            let mut x_sum = vec![0.0; steps];
            for k in start..(start + CHUNK).min(n_paths) {
                let lineage = RngLineage::new(master_seed, k as u64);
                let mut reference = sys.initial_state(lineage);
                let mut euler = reference.clone();
                let mut expo = reference.clone();
                for (s, &h) in plan.iter().enumerate() {
                    sys.exact_spectral_step(&mut reference, h)?;
                    sys.exp_euler_step(&mut expo, h)?;
                    x_sum[s] += dist_sq(&reference.coeffs, &expo.coeffs);
                    if with_euler {
                        sys.euler_step(&mut euler, h)?;
                        e_sum[s] += dist_sq(&reference.coeffs, &euler.coeffs);
                    }
                }
            }
            Ok((e_sum, x_sum))
        })
        .collect();
    let mut e_tot = vec![0.0; steps];
    let mut x_tot = vec![0.0; steps];
    for part in parts {
        let (e, x) = part?;
        e_tot.iter_mut().zip(e).for_each(|(a, b)| *a += b);
        x_tot.iter_mut().zip(x).for_each(|(a, b)| *a += b);
    }
    let rms_max = |v: &[f64]| v.iter().map(|s| (s / n_paths as f64).sqrt()).fold(0.0, f64::max);
    Ok((rms_max(&e_tot), rms_max(&x_tot)))
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// One row of a converse diagnostic table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConverseRow {
    /// Time `t` or eigenvalue `λ`.
    pub x: f64,
    /// `‖E x(t) - x†‖²` or `ω(λ)`.
    pub value: f64,
    /// Comparison function `ψ(1/t)` or `ψ(λ)`, `ψ = φ²`.
    pub reference: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConverseReport {
    pub time_rows: Vec<ConverseRow>,
    pub lambda_rows: Vec<ConverseRow>,
    pub sup_time: f64,
    pub sup_lambda: f64,
    /// Ratio of the largest to the smallest per-decade supremum.
    pub variation_time: f64,
    pub variation_lambda: f64,
}

/// Compares the noise-free bias `‖E x(t) - x†‖²` against `ψ(1/t)` and the
/// spectral tail `ω(λ)` against `ψ(λ)`, where `ψ = φ²` for the source family
/// `φ`. The bias uses exact data `y = A x†`. Eigenvalues below `lambda_floor`
/// are left out of the λ table.
pub fn converse_diagnostic(
    p: &ForwardProblem,
    x0: &DVector<f64>,
    family: SourceFamily,
    t_grid: &[f64],
    lambda_floor: f64,
) -> Result<ConverseReport> {
    family.validate()?;
    let x_true = p.require_x_true()?;
    if t_grid.is_empty() || t_grid.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(SarError::config("time grid must be non-empty and positive"));
    }
    let y = p.apply_forward(x_true)?;
    let psi = |l: f64| family.phi(l).powi(2);
    let time_rows: Vec<ConverseRow> = t_grid
        .iter()
        .map(|&t| {
            let mean = crate::integrators::analytic_mean(p, &y, x0, t)?;
            let value = p.norm_domain(&(mean - x_true)).powi(2);
            let reference = psi(1.0 / t);
            Ok(ConverseRow { x: t, value, reference, ratio: value / reference })
        })
        .collect::<Result<_>>()?;
    let lambda_rows: Vec<ConverseRow> = p
        .eigenvalues()
        .into_iter()
        .filter(|&l| l >= lambda_floor)
        .map(|l| {
            let value = p.spectral_tail(x0, l)?;
            let reference = psi(l);
            Ok(ConverseRow { x: l, value, reference, ratio: value / reference })
        })
        .collect::<Result<_>>()?;
    let sup = |rows: &[ConverseRow]| rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(ConverseReport {
        sup_time: sup(&time_rows),
        sup_lambda: sup(&lambda_rows),
        variation_time: decade_variation(&time_rows),
        variation_lambda: decade_variation(&lambda_rows),
        time_rows,
        lambda_rows,
    })
}

/// Groups rows into decades of `x` (anchored at the first row), takes the
/// supremum of the ratio in each, and returns max/min over the groups.
fn decade_variation(rows: &[ConverseRow]) -> f64 {
    let Some(anchor) = rows.first().map(|r| r.x) else {
        return f64::NAN;
    };
    let mut sups: std::collections::BTreeMap<i64, f64> = std::collections::BTreeMap::new();
    for r in rows {
        let k = ((r.x / anchor).log10().abs() + 1e-12).floor() as i64;
        let e = sups.entry(k).or_insert(0.0);
        *e = e.max(r.ratio);
    }
    let max = sups.values().copied().fold(0.0, f64::max);
    let min = sups.values().copied().fold(f64::INFINITY, f64::min);
    max / min
}

/// A local maximum of a map with its topographic prominence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub index: usize,
    /// `(row, column)` on a 2-D grid; `(index, 0)` on a 1-D grid.
    pub cell: (usize, usize),
    pub value: f64,
    pub prominence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentMap {
    pub order: usize,
    pub values: Vec<f64>,
    pub shape: (usize, usize),
    pub peaks: Vec<Peak>,
}

/// Relative prominence threshold for reported peaks.
pub const PEAK_PROMINENCE: f64 = 0.05;

/// Central-moment field of the given order (2 is the sample variance).
pub fn moment_maps(stats: &EnsembleStats, order: usize) -> Result<MomentMap> {
    let values: Vec<f64> = match order {
        2 => stats.variance.as_slice().to_vec(),
        3 => stats.central_m3.as_slice().to_vec(),
        4 => stats.central_m4.as_slice().to_vec(),
        _ => {
            return Err(SarError::config(format!(
                "moment order {order} is not accumulated (available: 2, 3, 4)"
            )))
        }
    };
    Ok(field_map(order, values, stats.grid2d.as_ref()))
}

/// Map of an arbitrary nodal field with its peaks; `order` is a label.
pub fn field_map(order: usize, values: Vec<f64>, grid: Option<&Grid2d>) -> MomentMap {
    let shape = grid.map(Grid2d::shape).unwrap_or((values.len(), 1));
    let peaks = find_peaks(&values, shape, PEAK_PROMINENCE);
    MomentMap { order, values, shape, peaks }
}

/// Local maxima (8-neighbourhood on 2-D grids, 2-neighbourhood on 1-D grids)
/// whose prominence is at least `rel` times the global maximum. Prominence is
/// the drop needed to reach higher ground, computed by descending flooding.
pub fn find_peaks(values: &[f64], shape: (usize, usize), rel: f64) -> Vec<Peak> {
    let (rows, cols) = shape;
    let n = values.len();
    assert_eq!(rows * cols, n, "map shape");
    if n == 0 {
        return Vec::new();
    }
    let global_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let global_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(global_max > 0.0) || !(global_max > global_min) {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let mut parent: Vec<usize> = (0..n).collect();
    let mut active = vec![false; n];
    let mut summit = vec![usize::MAX; n];
    let mut prominence = vec![f64::NAN; n];
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for &i in &order {
        let (r, c) = (i / cols, i % cols);
        let mut roots: Vec<usize> = Vec::new();
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                    continue;
                }
                let j = nr as usize * cols + nc as usize;
                if active[j] {
                    let root = find(&mut parent, j);
                    if !roots.contains(&root) {
                        roots.push(root);
                    }
                }
            }
        }
        active[i] = true;
        if roots.is_empty() {
            summit[i] = i;
            continue;
        }
        // the component with the highest summit survives
        roots.sort_by(|&a, &b| values[summit[b]].total_cmp(&values[summit[a]]).then(summit[a].cmp(&summit[b])));
        let keep = roots[0];
        for &other in &roots[1..] {
            let s = summit[other];
            prominence[s] = values[s] - values[i];
            parent[other] = keep;
        }
        parent[i] = keep;
    }
    let top = order[0];
    prominence[top] = values[top] - global_min;

    let threshold = rel * global_max;
    let mut peaks: Vec<Peak> = (0..n)
        .filter(|&i| prominence[i].is_finite() && prominence[i] >= threshold && values[i] > 0.0)
        .map(|i| Peak { index: i, cell: (i / cols, i % cols), value: values[i], prominence: prominence[i] })
        .collect();
    peaks.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.index.cmp(&b.index)));
    peaks
}
