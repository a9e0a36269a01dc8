//! Choice of the terminating time `t*`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::integrators::{SarSystem, TruthCoeffs, DEFAULT_QUAD_POINTS};
use crate::spectral::SourceFamily;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingRule {
    APriori,
    #[serde(alias = "chi1")]
    DiscrepancyChi1,
    #[serde(alias = "chi2")]
    DiscrepancyChi2,
    Balance,
}

impl StoppingRule {
    pub fn name(&self) -> &'static str {
        match self {
            StoppingRule::APriori => "a_priori",
            StoppingRule::DiscrepancyChi1 => "discrepancy_chi1",
            StoppingRule::DiscrepancyChi2 => "discrepancy_chi2",
            StoppingRule::Balance => "balance",
        }
    }
}

/// Special branches a rule can end in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopFlag {
    /// The discrepancy condition already holds at `t = 0`.
    Immediate,
    /// `δ` exceeds `Θ(t_min)`; `t*` was clamped to `t_min`.
    ClampedToMin,
    /// The error reached exactly zero in finite time.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingOutcome {
    pub rule: StoppingRule,
    pub t_star: f64,
    /// Rule-specific value at `t*`: `Θ(t*)` for the a priori rule, the
    /// residual norm for χ1, the expected squared residual for χ2 and
    /// `E‖x(t*) - x†‖² / t*` for the balance rule.
    pub residual_at_stop: f64,
    pub evaluations: usize,
    pub bracket: (f64, f64),
    pub flag: Option<StopFlag>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopOptions {
    pub tau: f64,
    /// First trial time of the bracket expansion.
    pub t_start: f64,
    /// Upper limit of the search; `None` means `1e8/σ_1²`.
    pub t_max: Option<f64>,
    pub expansion: f64,
    pub max_bisections: usize,
    pub quad_points: usize,
}

impl Default for StopOptions {
    fn default() -> Self {
        Self {
            tau: 1.1,
            t_start: 0.1,
            t_max: None,
            expansion: 2.0,
            max_bisections: 200,
            quad_points: DEFAULT_QUAD_POINTS,
        }
    }
}

impl StopOptions {
    fn validate(&self) -> Result<()> {
        if !(self.t_start.is_finite() && self.t_start > 0.0) {
            return Err(SarError::config(format!("bracket start must be positive, got {}", self.t_start)));
        }
        if !(self.expansion.is_finite() && self.expansion > 1.0) {
            return Err(SarError::config(format!("expansion factor must exceed 1, got {}", self.expansion)));
        }
        if let Some(t) = self.t_max {
            if !(t.is_finite() && t > 0.0) {
                return Err(SarError::config(format!("t_max must be positive, got {t}")));
            }
        }
        Ok(())
    }

    fn validate_tau(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 1.0) {
            return Err(SarError::config(format!("τ must exceed 1, got {}", self.tau)));
        }
        Ok(())
    }

    fn t_max_for(&self, sys: &SarSystem) -> f64 {
        self.t_max.unwrap_or(1e8 / sys.lambda()[0])
    }
}

struct Root {
    t: f64,
    value: f64,
    evaluations: usize,
    bracket: (f64, f64),
}

/// First crossing of a decreasing function through zero: expands from
/// `t_start` by `expansion` until `g ≤ 0`, then bisects on `log t`. The
/// bracket `(lo, hi)` keeps `g(lo) > 0 ≥ g(hi)` throughout.
fn first_crossing(
    rule: &'static str,
    opts: &StopOptions,
    t_max: f64,
    mut g: impl FnMut(f64) -> Result<f64>,
) -> Result<Root> {
    let mut evaluations = 0;
    let mut eval = |t: f64| -> Result<f64> {
        evaluations += 1;
        let v = g(t)?;
        if v.is_nan() {
            return Err(SarError::numerical(format!("{rule} evaluated to NaN at t = {t:e}")));
        }
        Ok(v)
    };
    let start = opts.t_start.min(t_max);
    let mut hi = start;
    let mut g_hi = eval(hi)?;
    let mut lo;
    if g_hi > 0.0 {
        loop {
            lo = hi;
            if hi >= t_max {
                return Err(SarError::NotConverged { rule, t_max, value: g_hi });
            }
            hi = (hi * opts.expansion).min(t_max);
            g_hi = eval(hi)?;
            if g_hi <= 0.0 {
                break;
            }
        }
    } else {
        // crossing lies below the starting point; contract towards zero
        lo = hi;
        let mut contractions = 0;
        loop {
            lo /= opts.expansion;
            contractions += 1;
            if eval(lo)? > 0.0 {
                break;
            }
            hi = lo;
            if contractions > 4000 || lo < f64::MIN_POSITIVE {
                return Err(SarError::numerical(format!("{rule}: no positive value found above t = 0")));
            }
        }
        g_hi = eval(hi)?;
    }
    for _ in 0..opts.max_bisections {
        if hi / lo - 1.0 <= 4.0 * f64::EPSILON {
            break;
        }
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        let v = eval(mid)?;
        if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
            g_hi = v;
        }
    }
    Ok(Root { t: hi, value: g_hi, evaluations, bracket: (lo, hi) })
}

/// `Θ(t) = t^{-1/2} φ(1/t)`.
pub fn theta(family: SourceFamily, t: f64) -> f64 {
    t.powf(-0.5) * family.phi(1.0 / t)
}

/// A priori time `t* = Θ^{-1}(δ)`.
pub fn a_priori_time(family: SourceFamily, delta: f64, opts: &StopOptions) -> Result<StoppingOutcome> {
    family.validate()?;
    opts.validate()?;
    if !(delta.is_finite() && delta > 0.0) {
        return Err(SarError::config(format!("noise level must be positive, got {delta}")));
    }
    let t_min = opts.t_start;
    if theta(family, t_min) <= delta {
        return Ok(StoppingOutcome {
            rule: StoppingRule::APriori,
            t_star: t_min,
            residual_at_stop: theta(family, t_min),
            evaluations: 1,
            bracket: (t_min, t_min),
            flag: Some(StopFlag::ClampedToMin),
        });
    }
    let t_max = opts.t_max.unwrap_or(f64::MAX / 4.0);
    let ln_delta = delta.ln();
    let root = first_crossing("a_priori", opts, t_max, |t| Ok(theta(family, t).ln() - ln_delta))?;
    let t_star = match family {
        SourceFamily::Holder { p } => {
            let closed = delta.powf(-2.0 / (2.0 * p + 1.0));
            if ((closed - root.t) / closed).abs() > 1e-8 {
                return Err(SarError::numerical(format!(
                    "a priori root {:e} disagrees with closed form {closed:e}",
                    root.t
                )));
            }
            closed
        }
        SourceFamily::Logarithmic { .. } => root.t,
    };
    Ok(StoppingOutcome {
        rule: StoppingRule::APriori,
        t_star,
        residual_at_stop: theta(family, t_star),
        evaluations: root.evaluations,
        bracket: root.bracket,
        flag: None,
    })
}

fn validate_delta(delta: f64) -> Result<()> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(SarError::config(format!("noise level must be non-negative, got {delta}")));
    }
    Ok(())
}

fn immediate(rule: StoppingRule, value: f64) -> StoppingOutcome {
    StoppingOutcome { rule, t_star: 0.0, residual_at_stop: value, evaluations: 1, bracket: (0.0, 0.0), flag: Some(StopFlag::Immediate) }
}

/// First `t` with `‖A E x^δ(t) - y^δ‖ ≤ τ δ`.
pub fn discrepancy_chi1(sys: &SarSystem, delta: f64, opts: &StopOptions) -> Result<StoppingOutcome> {
    opts.validate()?;
    opts.validate_tau()?;
    validate_delta(delta)?;
    let level = opts.tau * delta;
    let r0 = sys.mean_residual(0.0);
    if r0 <= level {
        return Ok(immediate(StoppingRule::DiscrepancyChi1, r0));
    }
    let t_max = opts.t_max_for(sys);
    let root = first_crossing("discrepancy_chi1", opts, t_max, |t| Ok(sys.mean_residual(t) - level))?;
    Ok(StoppingOutcome {
        rule: StoppingRule::DiscrepancyChi1,
        t_star: root.t,
        residual_at_stop: root.value + level,
        evaluations: root.evaluations,
        bracket: root.bracket,
        flag: None,
    })
}

/// First `t` with `E‖A x^δ(t) - y^δ‖² ≤ τ δ²`, expectation evaluated in
/// closed form.
pub fn discrepancy_chi2(sys: &SarSystem, delta: f64, opts: &StopOptions) -> Result<StoppingOutcome> {
    opts.validate()?;
    opts.validate_tau()?;
    validate_delta(delta)?;
    let level = opts.tau * delta * delta;
    let r0 = sys.expected_residual_sq(0.0, opts.quad_points)?;
    if r0 <= level {
        return Ok(immediate(StoppingRule::DiscrepancyChi2, r0));
    }
    let t_max = opts.t_max_for(sys);
    let root = first_crossing("discrepancy_chi2", opts, t_max, |t| {
        Ok(sys.expected_residual_sq(t, opts.quad_points)? - level)
    })?;
    Ok(StoppingOutcome {
        rule: StoppingRule::DiscrepancyChi2,
        t_star: root.t,
        residual_at_stop: root.value + level,
        evaluations: root.evaluations,
        bracket: root.bracket,
        flag: None,
    })
}

/// Root of `t⁻¹ E‖x(t) - x†‖² = δ²`, with `sys` built on exact data.
pub fn balance_time(sys: &SarSystem, truth: &TruthCoeffs, delta: f64, opts: &StopOptions) -> Result<StoppingOutcome> {
    opts.validate()?;
    if !(delta.is_finite() && delta > 0.0) {
        return Err(SarError::config(format!("noise level must be positive, got {delta}")));
    }
    let d2 = delta * delta;
    let mse0 = sys.mse(0.0, truth, opts.quad_points)?;
    if mse0 == 0.0 {
        return Ok(StoppingOutcome {
            rule: StoppingRule::Balance,
            t_star: 0.0,
            residual_at_stop: 0.0,
            evaluations: 1,
            bracket: (0.0, 0.0),
            flag: Some(StopFlag::Degenerate),
        });
    }
    let t_max = opts.t_max.unwrap_or(f64::MAX / 4.0);
    let mut degenerate_at = None;
    let root = first_crossing("balance", opts, t_max, |t| {
        let mse = sys.mse(t, truth, opts.quad_points)?;
        if mse == 0.0 && degenerate_at.is_none() {
            degenerate_at = Some(t);
        }
        Ok(mse / t - d2)
    })?;
    Ok(StoppingOutcome {
        rule: StoppingRule::Balance,
        t_star: root.t,
        residual_at_stop: root.value + d2,
        evaluations: root.evaluations,
        bracket: root.bracket,
        flag: degenerate_at.map(|_| StopFlag::Degenerate),
    })
}

/// True when `t*` reaches past the smallest resolved eigenvalue, i.e. the
/// effective spectral window `λ ≳ 1/t*` is no longer inside the discrete
/// spectrum.
pub fn beyond_resolution(sys: &SarSystem, t_star: f64) -> bool {
    t_star * sys.lambda()[sys.rank() - 1] > 1.0
}
