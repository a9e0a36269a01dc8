//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Run with `cargo test -p sar-core --test acceptance -- --nocapture`.

use std::time::{Duration, Instant};

use sar_core::config::{ExperimentConfig, SourceConfig};
use sar_core::ensemble::{converse_diagnostic, run_ensemble, EnsembleRequest};
use sar_core::experiments::{analyze_maps, order, rates, solve, write_moments, write_solution};
use sar_core::integrators::{NoiseSchedule, SarSystem, Scheme, DEFAULT_QUAD_POINTS};
use sar_core::spectral::{SourceDraw, SourceFamily};
use sar_core::stopping::StoppingRule;

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn run(id: usize, budget: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let start = Instant::now();
    let (ok, mut detail) = f();
    let elapsed = start.elapsed();
    let in_time = budget.is_none_or(|b| elapsed <= b);
    if !in_time {
        detail.push_str(&format!("; over runtime budget {:?}", budget.unwrap()));
    }
    let v = Verdict { id, pass: ok && in_time, detail, elapsed };
    println!(
        "criterion {:>2}: {} ({:.1}s) {}",
        v.id,
        if v.pass { "PASS" } else { "FAIL" },
        v.elapsed.as_secs_f64(),
        v.detail
    );
    v
}

fn toy_figure_config() -> ExperimentConfig {
    ExperimentConfig {
        delta: 0.01,
        tau: 1.1,
        dt: 0.1,
        rule: StoppingRule::DiscrepancyChi1,
        n_paths: 2000,
        levels: vec![0.7, 0.85],
        ..ExperimentConfig::default()
    }
}

fn holder_sweep_config(rule: StoppingRule) -> ExperimentConfig {
    ExperimentConfig {
        source: Some(SourceConfig { family: SourceFamily::Holder { p: 0.5 }, rho: 1.0, draw: SourceDraw::Sharp }),
        rule,
        n_paths: 500,
        ..ExperimentConfig::default()
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn c1_strong_order() -> (bool, String) {
    let cfg = ExperimentConfig { n_paths: 1000, ..toy_figure_config() };
    let res = match order(&cfg) {
        Ok(r) => r,
        Err(e) => return (false, format!("error: {e}")),
    };
    let (Some(e), Some(x)) = (res.euler_fit, res.exp_euler_fit) else {
        return (false, "missing fit".into());
    };
    let ok = (0.8..=1.2).contains(&e.slope) && (0.8..=1.2).contains(&x.slope);
    (ok, format!("euler slope {:.3}, exp-euler slope {:.3} (target [0.8, 1.2])", e.slope, x.slope))
}

fn c2_a_priori_rate() -> (bool, String) {
    match rates(&holder_sweep_config(StoppingRule::APriori)) {
        Ok(r) => (
            within(r.mse_fit.slope, 1.0, 0.15),
            format!("MSE slope {:.3} ± {:.3} (target 1 ± 0.15)", r.mse_fit.slope, r.mse_fit.half_width),
        ),
        Err(e) => (false, format!("error: {e}")),
    }
}

fn c3_discrepancy_scaling() -> (bool, String) {
    match rates(&holder_sweep_config(StoppingRule::DiscrepancyChi1)) {
        Ok(r) => (
            within(r.t_star_fit.slope, -1.0, 0.2) && within(r.mse_fit.slope, 1.0, 0.2),
            format!(
                "t* slope {:.3} (target -1 ± 0.2), MSE slope {:.3} (target 1 ± 0.2)",
                r.t_star_fit.slope, r.mse_fit.slope
            ),
        ),
        Err(e) => (false, format!("error: {e}")),
    }
}

fn c4_closed_forms() -> (bool, String) {
    let cfg = toy_figure_config();
    let p = cfg.build_problem().unwrap();
    let spec = cfg.build_spec(&p).unwrap();
    let (_, y) = cfg.build_data(&p).unwrap();
    let sys = SarSystem::new(&p, &spec, cfg.schedule, &y, &cfg.x0(&p)).unwrap();
    let (mode, t_end, dt, n_paths) = (0usize, 5.0, 0.01, 10_000);
    let req = EnsembleRequest {
        scheme: Scheme::ExactSpectral,
        dt,
        t_end,
        n_paths,
        levels: Vec::new(),
        master_seed: cfg.master_seed,
        path_offset: 0,
    };
    let stats = match run_ensemble(&p, &sys, &req, None) {
        Ok(s) => s,
        Err(e) => return (false, format!("error: {e}")),
    };
    let mean = sys.mean_coeffs(t_end)[mode];
    let var = sys.mode_variances(t_end, DEFAULT_QUAD_POINTS).unwrap()[mode];
    let se = (stats.coeff_variance[mode] / n_paths as f64).sqrt();
    let z = (stats.coeff_mean[mode] - mean).abs() / se;
    let rel = (stats.coeff_variance[mode] - var).abs() / var;
    (
        z <= 4.0 && rel <= 0.10,
        format!("mode {}, t = {t_end}: mean off by {z:.2} SE (max 4), variance rel. error {rel:.4} (max 0.10)", mode + 1),
    )
}

fn c5_bias_variance() -> (bool, String) {
    let cfg = toy_figure_config();
    let (_, report) = match solve(&cfg) {
        Ok(r) => r,
        Err(e) => return (false, format!("error: {e}")),
    };
    let mse = report.stats.mse.expect("toy truth known");
    let bias = report.analytic_bias_sq.expect("toy truth known");
    let predicted = bias + report.analytic_variance;
    let gap = (mse.value - predicted).abs();
    (
        gap <= 3.0 * mse.std_error,
        format!(
            "MSE {:.4e}, bias² + variance {:.4e}, gap {:.2} SE (max 3)",
            mse.value,
            predicted,
            gap / mse.std_error
        ),
    )
}

fn c6_variance_bound() -> (bool, String) {
    let cfg = toy_figure_config();
    let p = cfg.build_problem().unwrap();
    let spec = cfg.build_spec(&p).unwrap();
    let (_, y) = cfg.build_data(&p).unwrap();
    let bound = 2.0 * spec.trace_weighted;
    let times: Vec<f64> = (0..=120).map(|k| 10f64.powf(-2.0 + 0.1 * k as f64)).collect();
    let mut details = Vec::new();
    let mut ok = true;
    for schedule in [NoiseSchedule::HolderDecay { p: 0.5, c: 1.0 }, NoiseSchedule::LogDecay { mu: 1.0, c: 1.0 }] {
        let sys = SarSystem::new(&p, &spec, schedule, &y, &cfg.x0(&p)).unwrap();
        let ratios: Vec<f64> = times
            .iter()
            .map(|&t| sys.variance_trace(t, DEFAULT_QUAD_POINTS).unwrap() / schedule.value(t).powi(2))
            .collect();
        // T is the first grid time after the last violation.
        let last_bad = ratios.iter().rposition(|r| *r > bound);
        let detected = match last_bad {
            None => Some(times[0]),
            Some(k) if k + 1 < times.len() => Some(times[k + 1]),
            Some(_) => None,
        };
        let tail_decades = detected.map_or(0.0, |t| (times[times.len() - 1] / t).log10());
        ok &= detected.is_some() && tail_decades >= 2.0;
        details.push(format!(
            "{:?}: T = {}, final ratio {:.3e} vs bound {:.3e}",
            schedule,
            detected.map_or("none".into(), |t| format!("{t:.3e}")),
            ratios[ratios.len() - 1],
            bound
        ));
    }
    (ok, details.join("; "))
}

fn c7_figure_bands() -> (bool, String) {
    let (_, report) = match solve(&toy_figure_config()) {
        Ok(r) => r,
        Err(e) => return (false, format!("error: {e}")),
    };
    let coverage = report.coverage.iter().find(|(l, _)| (*l - 0.85).abs() < 1e-12).map(|c| c.1).unwrap_or(0.0);
    let (b70, b85) = (report.stats.band(0.7).unwrap(), report.stats.band(0.85).unwrap());
    let nested = (0..b70.lower.len()).all(|i| b85.lower[i] < b70.lower[i] && b70.upper[i] < b85.upper[i]);
    (
        coverage >= 0.7 && nested,
        format!(
            "t* = {:.4e}, 85% coverage {:.3} (min 0.70), 70% band strictly inside 85% band: {nested}",
            report.t_end, coverage
        ),
    )
}

fn c8_converse() -> (bool, String) {
    let cfg = holder_sweep_config(StoppingRule::APriori);
    let p = cfg.build_problem().unwrap();
    let family = SourceFamily::Holder { p: 0.5 };
    let lambdas = p.eigenvalues();
    let (l1, lr) = (lambdas[0], lambdas[lambdas.len() - 1]);
    let times: Vec<f64> = (0..=20).map(|k| 10.0 / l1 * 10f64.powf(0.1 * k as f64)).collect();
    let report = match converse_diagnostic(&p, &cfg.x0(&p), family, &times, 100.0 * lr) {
        Ok(r) => r,
        Err(e) => return (false, format!("error: {e}")),
    };
    let finite = report.sup_time.is_finite() && report.sup_lambda.is_finite();
    let ok = finite && report.variation_time < 2.0 && report.variation_lambda < 2.0;
    (
        ok,
        format!(
            "sup over t {:.3e} (variation {:.3}), sup over λ {:.3e} (variation {:.3}, {} eigenvalues), max variation 2",
            report.sup_time,
            report.variation_time,
            report.sup_lambda,
            report.variation_lambda,
            report.lambda_rows.len()
        ),
    )
}

fn c9_biosensor() -> (bool, String) {
    let cfg = ExperimentConfig { delta: 0.01, ..ExperimentConfig::biosensor_default() };
    let (_, report) = match solve(&cfg) {
        Ok(r) => r,
        Err(e) => return (false, format!("error: {e}")),
    };
    let maps = match analyze_maps(&cfg, &report) {
        Ok(m) => m,
        Err(e) => return (false, format!("error: {e}")),
    };
    (
        maps.recovered && maps.relative_residual <= 0.05,
        format!(
            "t* = {:.4e}, truth peaks {:?}, distance to nearest mean peak {:?} (max 1), relative residual {:.4} (max 0.05)",
            report.t_end, maps.truth_nodes, maps.truth_distance, maps.relative_residual
        ),
    )
}

fn c10_determinism() -> (bool, String) {
    let cfg = toy_figure_config();
    let write_with_threads = |threads: usize| -> Vec<Vec<u8>> {
        let dir = tempfile::tempdir().unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (p, report) = solve(&cfg).unwrap();
            let files = [
                write_solution(&cfg, &p, &report, dir.path()).unwrap(),
                write_moments(&cfg, &p, &report, dir.path()).unwrap(),
            ];
            files.iter().map(|f| std::fs::read(f).unwrap()).collect()
        })
    };
    let a = write_with_threads(1);
    let b = write_with_threads(4);
    let c = write_with_threads(4);
    let same = a == b && b == c;
    (same, format!("{} result files, identical across 3 runs (1, 4, 4 threads): {same}", a.len()))
}

#[test]
fn acceptance_criteria() {
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    let verdicts = [
        run(1, min(2), c1_strong_order),
        run(2, min(5), c2_a_priori_rate),
        run(3, min(5), c3_discrepancy_scaling),
        run(4, Some(Duration::from_secs(30)), c4_closed_forms),
        run(5, None, c5_bias_variance),
        run(6, None, c6_variance_bound),
        run(7, None, c7_figure_bands),
        run(8, None, c8_converse),
        run(9, min(10), c9_biosensor),
        run(10, None, c10_determinism),
    ];
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
