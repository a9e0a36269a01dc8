//! Experiment configuration, read from TOML and overridable from the CLI.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::integrators::{NoiseSchedule, Scheme};
use crate::noise::{absolute_delta, inject_data_noise, make_qwiener, QFamily, QWienerSpec, RngLineage};
use crate::problems::{make_biosensor_problem, make_toy_problem, BiosensorConfig, BiosensorTruth};
use crate::spectral::{ForwardProblem, SourceDraw, SourceFamily};
use crate::stopping::{StopOptions, StoppingRule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Toy {
        n: usize,
    },
    Biosensor {
        #[serde(default)]
        design: BiosensorConfig,
        #[serde(default)]
        truth: BiosensorTruth,
    },
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig::Toy { n: 100 }
    }
}

/// Replaces the built-in exact solution by `x† = x0 - φ(A*A) v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub family: SourceFamily,
    #[serde(default = "one")]
    pub rho: f64,
    #[serde(default)]
    pub draw: SourceDraw,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatesConfig {
    /// Relative noise levels, strictly decreasing.
    pub deltas: Vec<f64>,
    pub fixed_noise_direction: bool,
}

impl Default for RatesConfig {
    fn default() -> Self {
        Self { deltas: vec![1e-2, 3e-3, 1e-3, 3e-4, 1e-4], fixed_noise_direction: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrderConfig {
    /// Largest step; the sweep halves it `count - 1` times.
    pub dt0: f64,
    pub count: usize,
    pub t_end: f64,
}

impl Default for OrderConfig {
    fn default() -> Self {
        Self { dt0: 0.1, count: 5, t_end: 1.0 }
    }
}

impl OrderConfig {
    pub fn dts(&self) -> Vec<f64> {
        (0..self.count).map(|k| self.dt0 * 0.5f64.powi(k as i32)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub source: Option<SourceConfig>,
    /// Relative noise level `δ / ‖y‖`.
    pub delta: f64,
    pub q: QFamily,
    pub schedule: NoiseSchedule,
    pub scheme: Scheme,
    pub dt: f64,
    pub rule: StoppingRule,
    pub tau: f64,
    pub t_max: Option<f64>,
    /// Fixed end time; overrides the stopping rule when set.
    pub t_end: Option<f64>,
    pub n_paths: usize,
    pub levels: Vec<f64>,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub rates: RatesConfig,
    pub order: OrderConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig::default(),
            source: None,
            delta: 0.01,
            q: QFamily::default(),
            schedule: NoiseSchedule::default(),
            scheme: Scheme::ExactLaw,
            dt: 0.1,
            rule: StoppingRule::DiscrepancyChi1,
            tau: 1.1,
            t_max: None,
            t_end: None,
            n_paths: 2000,
            levels: vec![0.7, 0.85],
            master_seed: 20240607,
            output_dir: PathBuf::from("sar-out"),
            rates: RatesConfig::default(),
            order: OrderConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults for the synthetic two-peak sensorgram experiment.
    pub fn biosensor_default() -> Self {
        Self {
            problem: ProblemConfig::Biosensor { design: BiosensorConfig::default(), truth: BiosensorTruth::default() },
            q: QFamily::Scaled { c: 1e-3, beta: 2.0 },
            n_paths: 500,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SarError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SarError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match &self.problem {
            ProblemConfig::Toy { n } if *n < 10 => {
                return Err(SarError::config(format!("toy problem needs n ≥ 10, got {n}")))
            }
            ProblemConfig::Biosensor { design, .. } => design.validate()?,
            _ => {}
        }
        if let Some(src) = &self.source {
            src.family.validate()?;
            if !(src.rho.is_finite() && src.rho > 0.0) {
                return Err(SarError::config(format!("source norm bound must be positive, got {}", src.rho)));
            }
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(SarError::config(format!("delta must be non-negative, got {}", self.delta)));
        }
        self.schedule.validate()?;
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(SarError::config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.tau.is_finite() && self.tau > 1.0) {
            return Err(SarError::config(format!("tau must exceed 1, got {}", self.tau)));
        }
        if let Some(t) = self.t_end {
            if !(t.is_finite() && t >= 0.0) {
                return Err(SarError::config(format!("t_end must be non-negative, got {t}")));
            }
        }
        if self.n_paths < 2 {
            return Err(SarError::config(format!("n_paths must be at least 2, got {}", self.n_paths)));
        }
        if let Some(l) = self.levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
            return Err(SarError::config(format!("band level {l} is outside (0, 1)")));
        }
        if self.order.count < 4 || !(self.order.dt0 > 0.0) || !(self.order.t_end > 0.0) {
            return Err(SarError::config("order sweep needs count ≥ 4 and positive dt0, t_end"));
        }
        Ok(())
    }

    pub fn stop_options(&self) -> StopOptions {
        StopOptions { tau: self.tau, t_start: self.dt, t_max: self.t_max, ..StopOptions::default() }
    }

    /// Problem with its exact solution attached.
    pub fn build_problem(&self) -> Result<ForwardProblem> {
        let mut p = match &self.problem {
            ProblemConfig::Toy { n } => make_toy_problem(*n)?,
            ProblemConfig::Biosensor { design, truth } => {
                let mut p = make_biosensor_problem(design)?;
                truth.attach(&mut p)?;
                p
            }
        };
        if let Some(src) = &self.source {
            let x0 = self.x0(&p);
            p.source_condition_solution(
                src.family,
                src.rho,
                &x0,
                src.draw,
                RngLineage::new(self.master_seed, u64::MAX >> 1),
            )?;
        }
        Ok(p)
    }

    /// Initial guess; always the zero vector.
    pub fn x0(&self, p: &ForwardProblem) -> DVector<f64> {
        DVector::zeros(p.domain_dim())
    }

    pub fn build_spec(&self, p: &ForwardProblem) -> Result<QWienerSpec> {
        make_qwiener(p, &self.q)
    }

    /// Absolute noise level and the noisy data.
    pub fn build_data(&self, p: &ForwardProblem) -> Result<(f64, DVector<f64>)> {
        let delta = absolute_delta(p, self.delta)?;
        let y = inject_data_noise(p, delta, RngLineage::data_noise(self.master_seed, 0))?;
        Ok((delta, y))
    }
}
