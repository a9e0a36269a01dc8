//! Command-line front end of the `sar` binary.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::config::{ExperimentConfig, ProblemConfig, SourceConfig};
use crate::ensemble::converse_diagnostic;
use crate::error::{Result, SarError};
use crate::experiments::{analyze_maps, order, rates, solve, write_maps, write_moments, write_solution};
use crate::integrators::{Scheme, SarSystem};
use crate::io::{write_columns, FileHeader, RunManifest};
use crate::spectral::{SourceDraw, SourceFamily};
use crate::stopping::StoppingRule;

#[derive(Debug, Parser)]
#[command(name = "sar", version, about = "Stochastic asymptotical regularization experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pick t* with the configured rule and run an ensemble there.
    Solve,
    /// Run an ensemble to a fixed end time and write all moments.
    Ensemble,
    /// Error and stopping-time rates over a sequence of noise levels.
    Rates,
    /// Strong-error study of the stepping schemes.
    Order,
    /// Two-peak rate-constant reconstruction from synthetic sensorgrams.
    Biosensor,
    /// Source-condition diagnostic of the exact solution.
    Converse {
        /// Number of log-spaced times in [10/λ1, 1000/λ1].
        #[arg(long, default_value_t = 21)]
        times: usize,
        /// Leave out eigenvalues below this multiple of the smallest one.
        #[arg(long, default_value_t = 100.0)]
        lambda_floor: f64,
    },
    /// Print operator and noise-model facts as JSON.
    ProblemInfo,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment file; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// toy or biosensor; replaces the problem of the config file.
    #[arg(long, global = true, value_parser = ["toy", "biosensor"])]
    problem: Option<String>,
    /// Toy problem size.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Relative noise level δ/‖y‖.
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// a_priori, chi1, chi2 or balance.
    #[arg(long, global = true, value_parser = parse_name::<StoppingRule>)]
    rule: Option<StoppingRule>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// euler, exp_euler, exact_spectral or exact_law.
    #[arg(long, global = true, value_parser = parse_name::<Scheme>)]
    scheme: Option<Scheme>,
    #[arg(long, global = true)]
    paths: Option<usize>,
    #[arg(long, global = true)]
    t_end: Option<f64>,
    /// Upper limit of the stopping-time search.
    #[arg(long, global = true)]
    t_max: Option<f64>,
    /// Impose a Hölder source condition with exponent p.
    #[arg(long, global = true, conflicts_with = "log_source")]
    holder: Option<f64>,
    /// Impose a logarithmic source condition with exponent μ.
    #[arg(long, global = true)]
    log_source: Option<f64>,
    /// Number of step sizes in the order study.
    #[arg(long, global = true)]
    dts: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

fn parse_name<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown value {s:?}"))
}

impl Common {
    fn resolve(&self, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => base,
        };
        match self.problem.as_deref() {
            Some("toy") if !matches!(cfg.problem, ProblemConfig::Toy { .. }) => cfg.problem = ProblemConfig::default(),
            Some("biosensor") if !matches!(cfg.problem, ProblemConfig::Biosensor { .. }) => {
                cfg = ExperimentConfig { output_dir: cfg.output_dir, ..ExperimentConfig::biosensor_default() }
            }
            _ => {}
        }
        if let Some(count) = self.dts {
            cfg.order.count = count;
        }
        if let Some(n) = self.n {
            match &mut cfg.problem {
                ProblemConfig::Toy { n: size } => *size = n,
                ProblemConfig::Biosensor { .. } => return Err(SarError::config("--n applies to the toy problem only")),
            }
        }
        let family = match (self.holder, self.log_source) {
            (Some(p), _) => Some(SourceFamily::Holder { p }),
            (_, Some(mu)) => Some(SourceFamily::Logarithmic { mu }),
            _ => None,
        };
        if let Some(family) = family {
            cfg.source = Some(SourceConfig { family, rho: 1.0, draw: SourceDraw::default() });
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(
                if let Some(v) = self.$flag.clone() { cfg.$field = v; }
            )*};
        }
        set!(seed => master_seed, out => output_dir, delta => delta, rule => rule, tau => tau, dt => dt,
             scheme => scheme, paths => n_paths);
        if self.t_end.is_some() {
            cfg.t_end = self.t_end;
        }
        if self.t_max.is_some() {
            cfg.t_max = self.t_max;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 2 for usage and configuration errors,
/// 3 for numerical failures, 4 when a stopping rule does not converge.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.common.threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| SarError::config(e.to_string()))
            .and_then(|pool| pool.install(|| execute(&cli))),
        None => execute(&cli),
    };
    match result {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).unwrap_or_default();
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            0
        }
        Err(e) => {
            let record = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() });
            eprintln!("{record}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> Result<serde_json::Value> {
    let c = &cli.common;
    match &cli.command {
        Command::Solve => run_solve(c.resolve(ExperimentConfig::default())?, "solve"),
        Command::Ensemble => {
            let cfg = c.resolve(ExperimentConfig::default())?;
            if cfg.t_end.is_none() {
                return Err(SarError::config("ensemble needs --t-end or t_end in the config"));
            }
            run_solve(cfg, "ensemble")
        }
        Command::Biosensor => run_solve(c.resolve(ExperimentConfig::biosensor_default())?, "biosensor"),
        Command::Rates => run_rates(c.resolve(ExperimentConfig::default())?),
        Command::Order => run_order(c.resolve(ExperimentConfig::default())?),
        Command::Converse { times, lambda_floor } => {
            run_converse(c.resolve(ExperimentConfig::default())?, *times, *lambda_floor)
        }
        Command::ProblemInfo => problem_info(&c.resolve(ExperimentConfig::default())?),
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn finish(mut manifest: RunManifest, dir: &Path, results: serde_json::Value) -> Result<serde_json::Value> {
    manifest.results = results;
    let path = dir.join("manifest.json");
    manifest.files.push(path.clone());
    manifest.write(&path)?;
    Ok(json!({ "command": manifest.command, "files": manifest.files, "results": manifest.results }))
}

fn run_solve(cfg: ExperimentConfig, command: &str) -> Result<serde_json::Value> {
    let dir = cfg.output_dir.clone();
    prepare_dir(&dir)?;
    let mut manifest = RunManifest::new(command, &cfg)?;
    let start = Instant::now();
    let (p, report) = solve(&cfg)?;
    manifest.timings_s.insert("ensemble".into(), start.elapsed().as_secs_f64());
    manifest.files.push(write_solution(&cfg, &p, &report, &dir)?);
    let mut results = json!({
        "delta": report.delta,
        "t_end": report.t_end,
        "stopping": report.outcome,
        "n_paths": report.stats.n_paths,
        "excluded": report.stats.excluded,
        "variance_trace": report.stats.variance_trace(),
        "analytic_variance_trace": report.analytic_variance,
        "mse": report.stats.mse,
        "analytic_bias_sq": report.analytic_bias_sq,
        "coverage": report.coverage,
        "relative_residual": report.relative_residual,
        "beyond_resolution": report.beyond_resolution,
    });
    if command != "solve" {
        manifest.files.push(write_moments(&cfg, &p, &report, &dir)?);
    }
    if matches!(cfg.problem, ProblemConfig::Biosensor { .. }) {
        manifest.files.push(write_maps(&cfg, &p, &report, &dir)?);
        let maps = analyze_maps(&cfg, &report)?;
        let path = dir.join("peaks.json");
        std::fs::write(&path, serde_json::to_string_pretty(&maps).map_err(|e| SarError::Parse(e.to_string()))?)?;
        manifest.files.push(path);
        results["peaks_recovered"] = json!(maps.recovered);
        results["truth_distance"] = json!(maps.truth_distance);
    }
    finish(manifest, &dir, results)
}

fn run_rates(cfg: ExperimentConfig) -> Result<serde_json::Value> {
    let dir = cfg.output_dir.clone();
    prepare_dir(&dir)?;
    let mut manifest = RunManifest::new("rates", &cfg)?;
    let start = Instant::now();
    let r = rates(&cfg)?;
    manifest.timings_s.insert("sweep".into(), start.elapsed().as_secs_f64());
    let path = dir.join("rates.tsv");
    let header = FileHeader::new(cfg.master_seed, manifest.config_hash.clone())
        .with("rule", cfg.rule.name())
        .with("mse_slope", format!("{:.17e}", r.mse_fit.slope))
        .with("t_star_slope", format!("{:.17e}", r.t_star_fit.slope));
    write_columns(
        &path,
        &header,
        &[
            ("delta", &r.deltas),
            ("absolute_delta", &r.absolute_deltas),
            ("mse", &r.errors),
            ("mse_std_error", &r.std_errors),
            ("t_star", &r.t_stars),
        ],
    )?;
    manifest.files.push(path);
    let results = json!({
        "mse_fit": r.mse_fit,
        "t_star_fit": r.t_star_fit,
        "loglog_fit": r.loglog_fit,
        "beyond_resolution": r.beyond_resolution,
        "outcomes": r.outcomes,
    });
    finish(manifest, &dir, results)
}

fn run_order(cfg: ExperimentConfig) -> Result<serde_json::Value> {
    let dir = cfg.output_dir.clone();
    prepare_dir(&dir)?;
    let mut manifest = RunManifest::new("order", &cfg)?;
    let start = Instant::now();
    let r = order(&cfg)?;
    manifest.timings_s.insert("sweep".into(), start.elapsed().as_secs_f64());
    let path = dir.join("order.tsv");
    let euler: Vec<f64> = r.euler_errors.iter().map(|e| e.unwrap_or(f64::NAN)).collect();
    let header = FileHeader::new(cfg.master_seed, manifest.config_hash.clone()).with("t_end", cfg.order.t_end);
    write_columns(&path, &header, &[("dt", &r.dts), ("euler_error", &euler), ("exp_euler_error", &r.exp_euler_errors)])?;
    manifest.files.push(path);
    finish(manifest, &dir, json!({ "euler_fit": r.euler_fit, "exp_euler_fit": r.exp_euler_fit }))
}

fn run_converse(cfg: ExperimentConfig, times: usize, lambda_floor: f64) -> Result<serde_json::Value> {
    let family = cfg
        .source
        .as_ref()
        .map(|s| s.family)
        .ok_or_else(|| SarError::config("converse needs a source family (--holder or --log-source)"))?;
    if times < 2 {
        return Err(SarError::config("converse needs at least 2 times"));
    }
    let dir = cfg.output_dir.clone();
    prepare_dir(&dir)?;
    let mut manifest = RunManifest::new("converse", &cfg)?;
    let p = cfg.build_problem()?;
    let lambdas = p.eigenvalues();
    let (l1, lr) = (lambdas[0], lambdas[lambdas.len() - 1]);
    let grid: Vec<f64> =
        (0..times).map(|k| 10.0 / l1 * 100f64.powf(k as f64 / (times - 1) as f64)).collect();
    let report = converse_diagnostic(&p, &cfg.x0(&p), family, &grid, lambda_floor * lr)?;
    let header = FileHeader::new(cfg.master_seed, manifest.config_hash.clone());
    for (name, rows) in [("converse_time.tsv", &report.time_rows), ("converse_lambda.tsv", &report.lambda_rows)] {
        let cols: [Vec<f64>; 4] = [
            rows.iter().map(|r| r.x).collect(),
            rows.iter().map(|r| r.value).collect(),
            rows.iter().map(|r| r.reference).collect(),
            rows.iter().map(|r| r.ratio).collect(),
        ];
        let path = dir.join(name);
        write_columns(&path, &header, &[("x", &cols[0]), ("value", &cols[1]), ("reference", &cols[2]), ("ratio", &cols[3])])?;
        manifest.files.push(path);
    }
    let results = json!({
        "sup_time": report.sup_time,
        "sup_lambda": report.sup_lambda,
        "variation_time": report.variation_time,
        "variation_lambda": report.variation_lambda,
    });
    finish(manifest, &dir, results)
}

fn problem_info(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let p = cfg.build_problem()?;
    let spec = cfg.build_spec(&p)?;
    let (delta, y) = cfg.build_data(&p)?;
    let sys = SarSystem::new(&p, &spec, cfg.schedule, &y, &cfg.x0(&p))?;
    let s = p.singular_values();
    Ok(json!({
        "domain_dim": p.domain_dim(),
        "range_dim": p.range_dim(),
        "rank": p.rank(),
        "sigma_max": s[0],
        "sigma_min": s[s.len() - 1],
        "orthonormality_defect": p.orthonormality_defect(),
        "trace_weighted": spec.trace_weighted,
        "euler_dt_limit": sys.euler_dt_limit(),
        "absolute_delta": delta,
        "has_exact_solution": p.x_true().is_some(),
    }))
}
