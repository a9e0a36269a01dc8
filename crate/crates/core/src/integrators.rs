//! Time integration of the stochastic flow
//! `dx = A*(y^δ - A x) dt + f(t) dB_t` in the singular basis.
//!
//! Every mode evolves as an independent Ornstein–Uhlenbeck process
//! `dξ_j = (σ_j ȳ_j - σ_j² ξ_j) dt + f(t) √q_j dβ_j` with `ȳ_j = ⟨y^δ, v_j⟩`.
//! All schemes draw their Gaussian increments from the same lineage blocks,
//! so paths computed with different schemes are coupled.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, SarError};
use crate::noise::{QWienerSpec, RngLineage};
use crate::quadrature::GaussLegendre;
use crate::spectral::{expm1_ratio, ForwardProblem, SourceFamily};

/// Default Gauss–Legendre points per panel for variance integrals.
pub const DEFAULT_QUAD_POINTS: usize = 16;

/// Amplitude `f(t)` of the stochastic forcing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// `c (1 + t)^{-p}`.
    HolderDecay { p: f64, c: f64 },
    /// `c log^{-μ}(e + t)`.
    LogDecay { mu: f64, c: f64 },
    Constant { c: f64 },
    Zero,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::HolderDecay { p: 0.5, c: 1.0 }
    }
}

impl NoiseSchedule {
    /// Decaying schedule with `f(t) = O(φ(1/t))` for the given source family.
    pub fn matching(family: SourceFamily, c: f64) -> Self {
        match family {
            SourceFamily::Holder { p } => NoiseSchedule::HolderDecay { p, c },
            SourceFamily::Logarithmic { mu } => NoiseSchedule::LogDecay { mu, c },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseSchedule::HolderDecay { p, c } => p.is_finite() && p >= 0.0 && c.is_finite() && c >= 0.0,
            NoiseSchedule::LogDecay { mu, c } => mu.is_finite() && mu > 0.0 && c.is_finite() && c >= 0.0,
            NoiseSchedule::Constant { c } => c.is_finite() && c >= 0.0,
            NoiseSchedule::Zero => true,
        };
        if ok {
            Ok(())
        } else {
            Err(SarError::config(format!("invalid noise schedule {self:?}")))
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::HolderDecay { p, c } => c * (1.0 + t).powf(-p),
            NoiseSchedule::LogDecay { mu, c } => c * (std::f64::consts::E + t).ln().powf(-mu),
            NoiseSchedule::Constant { c } => c,
            NoiseSchedule::Zero => 0.0,
        }
    }

    /// Global Lipschitz constant of `f` on `[0, ∞)`.
    pub fn lipschitz_bound(&self) -> f64 {
        match *self {
            NoiseSchedule::HolderDecay { p, c } => c * p,
            NoiseSchedule::LogDecay { mu, c } => c * mu / std::f64::consts::E,
            NoiseSchedule::Constant { .. } | NoiseSchedule::Zero => 0.0,
        }
    }

    /// `sup_{s ≤ t} f(s)`.
    pub fn sup_up_to(&self, _t: f64) -> f64 {
        self.value(0.0)
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            NoiseSchedule::Zero => true,
            NoiseSchedule::HolderDecay { c, .. }
            | NoiseSchedule::LogDecay { c, .. }
            | NoiseSchedule::Constant { c } => c == 0.0,
        }
    }

    /// True when `f(t) → 0` as `t → ∞`.
    pub fn is_decaying(&self) -> bool {
        match *self {
            NoiseSchedule::HolderDecay { p, .. } => p > 0.0 || self.is_zero(),
            NoiseSchedule::LogDecay { .. } | NoiseSchedule::Zero => true,
            NoiseSchedule::Constant { c } => c == 0.0,
        }
    }

    /// `∫_0^t e^{-2λ(t-s)} f(s)² ds`.
    pub fn damped_energy(&self, lambda: f64, t: f64, quad_points: usize) -> Result<f64> {
        if t <= 0.0 {
            return Ok(0.0);
        }
        match *self {
            NoiseSchedule::Zero => Ok(0.0),
            NoiseSchedule::Constant { c } => Ok(c * c * t * expm1_ratio(2.0 * lambda * t)),
            _ if self.is_zero() => Ok(0.0),
            _ => self.damped_energy_quadrature(lambda, t, quad_points),
        }
    }

    fn damped_energy_quadrature(&self, lambda: f64, t: f64, quad_points: usize) -> Result<f64> {
        const TOL: f64 = 1e-9;
        const MAX_REFINE: usize = 12;
        let rule = GaussLegendre::new(quad_points.max(DEFAULT_QUAD_POINTS));
        let integrand = |s: f64| (-2.0 * lambda * (t - s)).exp() * self.value(s).powi(2);
        let mut breaks = panel_breaks(lambda, t);
        let sum_over = |breaks: &[f64]| -> f64 {
            breaks.windows(2).map(|w| rule.integrate(w[0], w[1], integrand)).sum()
        };
        let mut prev = sum_over(&breaks);
        let mut change = f64::INFINITY;
        for _ in 0..MAX_REFINE {
            let mut finer = Vec::with_capacity(2 * breaks.len());
            for w in breaks.windows(2) {
                finer.push(w[0]);
                finer.push(0.5 * (w[0] + w[1]));
            }
            finer.push(*breaks.last().expect("non-empty breakpoints"));
            breaks = finer;
            let next = sum_over(&breaks);
            change = if next == 0.0 { (next - prev).abs() } else { ((next - prev) / next).abs() };
            prev = next;
            if change < TOL {
                return Ok(next);
            }
        }
        Err(SarError::numerical(format!(
            "variance quadrature did not converge at t = {t:e}, λ = {lambda:e} (relative change {change:e})"
        )))
    }
}

/// Panel endpoints adapted to the integrand `e^{-2λ(t-s)} f(s)²`: geometric
/// in `1 + s` to follow the decay of `f`, and geometric in `t - s` near the
/// upper end to follow the exponential.
fn panel_breaks(lambda: f64, t: f64) -> Vec<f64> {
    let width = 0.5 / lambda;
    let lower = if width.is_finite() { (t - 50.0 * width).max(0.0) } else { 0.0 };
    let mut pts = vec![lower, t];
    let mut s = (1.0 + lower) * 2.0 - 1.0;
    while s < t {
        pts.push(s);
        s = (1.0 + s) * 2.0 - 1.0;
    }
    if width.is_finite() {
        let mut d = width;
        while t - d > lower {
            pts.push(t - d);
            d *= 2.0;
        }
        // resolve the last decay length finely as well
        let mut d = width / 2.0;
        for _ in 0..4 {
            if t - d > lower {
                pts.push(t - d);
            }
            d /= 2.0;
        }
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * t.max(1.0));
    pts
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Euler–Maruyama; stable for `dt < 2/σ_1²`.
    Euler,
    /// Exponential Euler; exact homogeneous propagator.
    ExpEuler,
    /// Exact Ornstein–Uhlenbeck transition with `f` frozen over each step.
    ExactSpectral,
    /// Direct sample of the Gaussian law of `x(t_end)`; no time stepping.
    ExactLaw,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::ExpEuler => "exp_euler",
            Scheme::ExactSpectral => "exact_spectral",
            Scheme::ExactLaw => "exact_law",
        }
    }
}

/// Per-path solution coefficients `ξ_j(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SarState {
    pub t: f64,
    pub coeffs: Vec<f64>,
    pub lineage: RngLineage,
}

/// Snapshot of a path at a requested time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub coeffs: Vec<f64>,
}

/// Mean and per-mode standard deviation of the Gaussian law of `ξ(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalLaw {
    pub t: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TerminalLaw {
    /// Draws `ξ = mean + std ⊙ z` using the lineage's step-0 block.
    pub fn sample(&self, lineage: RngLineage) -> Vec<f64> {
        let z = lineage.at_step(0).normals(self.mean.len());
        self.mean
            .iter()
            .zip(&self.std)
            .zip(z)
            .map(|((m, s), z)| m + s * z)
            .collect()
    }
}

/// Exact solution in the singular basis, used for error measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthCoeffs {
    pub coeffs: Vec<f64>,
    /// Squared norm of the part of `x0 - x†` outside the retained modes.
    pub perp_sq: f64,
}

impl TruthCoeffs {
    pub fn new(p: &ForwardProblem, x0: &DVector<f64>) -> Result<Self> {
        let x_true = p.require_x_true()?;
        check_dim(p.domain_dim(), x0.len())?;
        let coeffs = p.spectral_coefficients(x_true)?;
        let diff = x0 - x_true;
        let diff_c = p.spectral_coefficients(&diff)?;
        let perp = &diff - p.synthesize(&diff_c)?;
        Ok(Self { coeffs: coeffs.as_slice().to_vec(), perp_sq: p.inner_domain(&perp, &perp) })
    }

    /// `‖x - x†‖²` for a state with the given coefficients.
    pub fn error_sq(&self, coeffs: &[f64]) -> f64 {
        self.perp_sq + coeffs.iter().zip(&self.coeffs).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    }
}

/// Everything a path needs, precomputed from the problem, covariance,
/// schedule, data and initial guess.
#[derive(Clone, Debug)]
pub struct SarSystem {
    sigma: Vec<f64>,
    lambda: Vec<f64>,
    q: Vec<f64>,
    data: Vec<f64>,
    x0: Vec<f64>,
    x0_perp: DVector<f64>,
    /// Coefficients of `A x0 - y^δ` on the `v_j`.
    residual0: Vec<f64>,
    /// Squared norm of `A x0 - y^δ` outside the retained `v_j`.
    residual_perp_sq: f64,
    schedule: NoiseSchedule,
}

impl SarSystem {
    pub fn new(
        p: &ForwardProblem,
        spec: &QWienerSpec,
        schedule: NoiseSchedule,
        y_delta: &DVector<f64>,
        x0: &DVector<f64>,
    ) -> Result<Self> {
        schedule.validate()?;
        check_dim(p.rank(), spec.len())?;
        check_dim(p.range_dim(), y_delta.len())?;
        check_dim(p.domain_dim(), x0.len())?;
        if y_delta.iter().chain(x0.iter()).any(|v| !v.is_finite()) {
            return Err(SarError::Domain("data or initial guess has non-finite entries".into()));
        }
        let sigma: Vec<f64> = p.singular_values().iter().copied().collect();
        let lambda = sigma.iter().map(|s| s * s).collect();
        let data = p.data_coefficients(y_delta)?;
        let x0_c = p.spectral_coefficients(x0)?;
        let x0_perp = x0 - p.synthesize(&x0_c)?;
        let resid = p.apply_forward(x0)? - y_delta;
        let resid_c = p.data_coefficients(&resid)?;
        let resid_perp = &resid - p.left_vectors() * &resid_c;
        Ok(Self {
            sigma,
            lambda,
            q: spec.q.clone(),
            data: data.as_slice().to_vec(),
            x0: x0_c.as_slice().to_vec(),
            x0_perp,
            residual0: resid_c.as_slice().to_vec(),
            residual_perp_sq: p.inner_range(&resid_perp, &resid_perp),
            schedule,
        })
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn data_coeffs(&self) -> &[f64] {
        &self.data
    }

    pub fn x0_coeffs(&self) -> &[f64] {
        &self.x0
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }

    pub fn with_schedule(&self, schedule: NoiseSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self { schedule, ..self.clone() })
    }

    pub fn initial_state(&self, lineage: RngLineage) -> SarState {
        SarState { t: 0.0, coeffs: self.x0.clone(), lineage: lineage.at_step(0) }
    }

    /// Largest Euler step allowed, `2/σ_1²`.
    pub fn euler_dt_limit(&self) -> f64 {
        2.0 / self.lambda[0]
    }

    pub fn check_dt(&self, scheme: Scheme, dt: f64) -> Result<()> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(SarError::config(format!("time step must be positive, got {dt}")));
        }
        if scheme == Scheme::Euler && dt >= self.euler_dt_limit() {
            return Err(SarError::config(format!(
                "Euler step dt = {dt} violates dt < 2/σ_1² = {}",
                self.euler_dt_limit()
            )));
        }
        Ok(())
    }

    fn draw(&self, state: &SarState) -> Vec<f64> {
        state.lineage.normals(self.rank())
    }

    fn finish_step(state: &mut SarState, dt: f64) {
        state.t += dt;
        state.lineage = state.lineage.advanced();
    }

    fn validate_state(&self, state: &SarState) -> Result<()> {
        check_dim(self.rank(), state.coeffs.len())?;
        if state.coeffs.iter().any(|c| !c.is_finite()) {
            return Err(SarError::numerical(format!("non-finite coefficients at t = {}", state.t)));
        }
        Ok(())
    }

    /// `ξ ← ξ + dt(σ ȳ - σ² ξ) + f(t_k) √(q dt) z`.
    pub fn euler_step(&self, state: &mut SarState, dt: f64) -> Result<()> {
        self.check_dt(Scheme::Euler, dt)?;
        self.validate_state(state)?;
        let f = self.schedule.value(state.t);
        let z = self.draw(state);
        for j in 0..self.rank() {
            let drift = self.sigma[j] * self.data[j] - self.lambda[j] * state.coeffs[j];
            state.coeffs[j] += dt * drift + f * (self.q[j] * dt).sqrt() * z[j];
        }
        Self::finish_step(state, dt);
        Ok(())
    }

    /// `ξ ← e^{-σ² dt}[ξ + σ ȳ dt + f(t_k) √(q dt) z]`.
    pub fn exp_euler_step(&self, state: &mut SarState, dt: f64) -> Result<()> {
        self.check_dt(Scheme::ExpEuler, dt)?;
        self.validate_state(state)?;
        let f = self.schedule.value(state.t);
        let z = self.draw(state);
        for j in 0..self.rank() {
            let inner = state.coeffs[j] + self.sigma[j] * self.data[j] * dt + f * (self.q[j] * dt).sqrt() * z[j];
            state.coeffs[j] = (-self.lambda[j] * dt).exp() * inner;
        }
        Self::finish_step(state, dt);
        Ok(())
    }

    /// Exact transition with `f` frozen at the left endpoint.
    pub fn exact_spectral_step(&self, state: &mut SarState, dt: f64) -> Result<()> {
        self.check_dt(Scheme::ExactSpectral, dt)?;
        self.validate_state(state)?;
        let f = self.schedule.value(state.t);
        let z = self.draw(state);
        for j in 0..self.rank() {
            let l = self.lambda[j];
            let decay = (-l * dt).exp();
            let forcing = self.sigma[j] * self.data[j] * dt * expm1_ratio(l * dt);
            let var = self.q[j] * f * f * dt * expm1_ratio(2.0 * l * dt);
            state.coeffs[j] = decay * state.coeffs[j] + forcing + var.sqrt() * z[j];
        }
        Self::finish_step(state, dt);
        Ok(())
    }

    pub fn step(&self, scheme: Scheme, state: &mut SarState, dt: f64) -> Result<()> {
        match scheme {
            Scheme::Euler => self.euler_step(state, dt),
            Scheme::ExpEuler => self.exp_euler_step(state, dt),
            Scheme::ExactSpectral => self.exact_spectral_step(state, dt),
            Scheme::ExactLaw => Err(SarError::Unsupported(
                "exact_law samples the terminal law and has no step map".into(),
            )),
        }
    }

    /// Step sizes covering `[0, t_end]`: whole steps of `dt` plus a shorter
    /// final step when `t_end` is not a multiple of `dt`.
    pub fn step_plan(dt: f64, t_end: f64) -> Vec<f64> {
        if t_end <= 0.0 {
            return Vec::new();
        }
        let whole = (t_end / dt + 1e-9).floor() as usize;
        let mut plan = vec![dt; whole];
        let rest = t_end - whole as f64 * dt;
        if rest > 1e-12 * dt {
            plan.push(rest);
        }
        plan
    }

    /// Runs one path from `x0` to `t_end`.
    pub fn run_path(&self, scheme: Scheme, dt: f64, t_end: f64, lineage: RngLineage) -> Result<SarState> {
        if !(t_end.is_finite() && t_end >= 0.0) {
            return Err(SarError::config(format!("end time must be non-negative, got {t_end}")));
        }
        if scheme == Scheme::ExactLaw {
            let law = self.terminal_law(t_end, DEFAULT_QUAD_POINTS)?;
            return Ok(SarState { t: t_end, coeffs: law.sample(lineage), lineage: lineage.at_step(1) });
        }
        self.check_dt(scheme, dt)?;
        let mut state = self.initial_state(lineage);
        for h in Self::step_plan(dt, t_end) {
            self.step(scheme, &mut state, h)?;
        }
        state.t = t_end;
        Ok(state)
    }

    /// Runs one path and records the state at each requested time (sorted,
    /// within `[0, t_end]`), rounded to the step grid.
    pub fn run_path_snapshots(
        &self,
        scheme: Scheme,
        dt: f64,
        t_end: f64,
        lineage: RngLineage,
        times: &[f64],
    ) -> Result<Vec<Snapshot>> {
        self.check_dt(scheme, dt)?;
        if scheme == Scheme::ExactLaw {
            return Err(SarError::Unsupported("snapshots need a stepping scheme".into()));
        }
        let mut wanted: Vec<f64> = times.iter().copied().filter(|t| (0.0..=t_end).contains(t)).collect();
        wanted.sort_by(f64::total_cmp);
        let mut out = Vec::with_capacity(wanted.len());
        let mut state = self.initial_state(lineage);
        let mut next = wanted.iter().peekable();
        let tol = 0.5 * dt;
        while next.peek().is_some_and(|&&t| t <= state.t + tol) {
            out.push(Snapshot { t: state.t, coeffs: state.coeffs.clone() });
            next.next();
        }
        for h in Self::step_plan(dt, t_end) {
            self.step(scheme, &mut state, h)?;
            while next.peek().is_some_and(|&&t| t <= state.t + tol) {
                out.push(Snapshot { t: state.t, coeffs: state.coeffs.clone() });
                next.next();
            }
        }
        Ok(out)
    }

    /// `E ξ_j(t) = e^{-λt} ⟨x0, u_j⟩ + (1 - e^{-λt})/σ_j · ȳ_j`.
    pub fn mean_coeffs(&self, t: f64) -> Vec<f64> {
        (0..self.rank())
            .map(|j| {
                let l = self.lambda[j];
                (-l * t).exp() * self.x0[j] + self.sigma[j] * self.data[j] * t * expm1_ratio(l * t)
            })
            .collect()
    }

    /// `Var ξ_j(t) = q_j ∫_0^t e^{-2λ_j(t-s)} f(s)² ds`.
    pub fn mode_variances(&self, t: f64, quad_points: usize) -> Result<Vec<f64>> {
        if quad_points < DEFAULT_QUAD_POINTS {
            return Err(SarError::config(format!("need at least 16 quadrature points, got {quad_points}")));
        }
        (0..self.rank())
            .map(|j| {
                if self.q[j] == 0.0 {
                    Ok(0.0)
                } else {
                    Ok(self.q[j] * self.schedule.damped_energy(self.lambda[j], t, quad_points)?)
                }
            })
            .collect()
    }

    /// `E‖x(t) - E x(t)‖²`.
    pub fn variance_trace(&self, t: f64, quad_points: usize) -> Result<f64> {
        Ok(self.mode_variances(t, quad_points)?.iter().sum())
    }

    pub fn terminal_law(&self, t: f64, quad_points: usize) -> Result<TerminalLaw> {
        let std = self.mode_variances(t, quad_points)?.into_iter().map(f64::sqrt).collect();
        Ok(TerminalLaw { t, mean: self.mean_coeffs(t), std })
    }

    /// `‖A E x(t) - y^δ‖_w`.
    pub fn mean_residual(&self, t: f64) -> f64 {
        self.mean_residual_sq(t).sqrt()
    }

    fn mean_residual_sq(&self, t: f64) -> f64 {
        self.residual_perp_sq
            + self
                .residual0
                .iter()
                .zip(&self.lambda)
                .map(|(d, l)| ((-l * t).exp() * d).powi(2))
                .sum::<f64>()
    }

    /// `‖A x - y^δ‖²` for a state with the given coefficients.
    pub fn residual_sq(&self, coeffs: &[f64]) -> f64 {
        self.residual_perp_sq
            + coeffs
                .iter()
                .zip(&self.x0)
                .zip(&self.sigma)
                .zip(&self.residual0)
                .map(|(((c, x0), s), d)| (s * (c - x0) + d).powi(2))
                .sum::<f64>()
    }

    /// `E‖A x(t) - y^δ‖² = ‖A E x(t) - y^δ‖² + Σ σ_j² Var ξ_j(t)`.
    pub fn expected_residual_sq(&self, t: f64, quad_points: usize) -> Result<f64> {
        let var = self.mode_variances(t, quad_points)?;
        Ok(self.mean_residual_sq(t) + var.iter().zip(&self.lambda).map(|(v, l)| v * l).sum::<f64>())
    }

    /// `‖E x(t) - x†‖²`.
    pub fn bias_sq(&self, t: f64, truth: &TruthCoeffs) -> f64 {
        truth.error_sq(&self.mean_coeffs(t))
    }

    /// `E‖x(t) - x†‖² = ‖E x(t) - x†‖² + E‖x(t) - E x(t)‖²`.
    pub fn mse(&self, t: f64, truth: &TruthCoeffs, quad_points: usize) -> Result<f64> {
        Ok(self.bias_sq(t, truth) + self.variance_trace(t, quad_points)?)
    }

    /// Grid values `x0_⊥ + Σ ξ_j u_j`.
    pub fn to_grid(&self, p: &ForwardProblem, coeffs: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.rank(), coeffs.len())?;
        Ok(&self.x0_perp + p.right_vectors() * DVector::from_column_slice(coeffs))
    }

    /// Per-node variance `Σ_j u_j(s)² Var ξ_j`.
    pub fn node_variance(&self, p: &ForwardProblem, mode_var: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.rank(), mode_var.len())?;
        let u = p.right_vectors();
        Ok(DVector::from_fn(p.domain_dim(), |i, _| {
            (0..self.rank()).map(|j| u[(i, j)].powi(2) * mode_var[j]).sum()
        }))
    }
}

/// `E x^δ(t) = (I - A*A g(t, A*A)) x0 + g(t, A*A) A* y^δ`.
pub fn analytic_mean(p: &ForwardProblem, y_delta: &DVector<f64>, x0: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(SarError::config(format!("time must be non-negative, got {t}")));
    }
    let sys = SarSystem::new(p, &QWienerSpec::zero(p.rank()), NoiseSchedule::Zero, y_delta, x0)?;
    sys.to_grid(p, &sys.mean_coeffs(t))
}

/// `E‖x(t) - E x(t)‖² = Σ_j q_j ∫_0^t e^{-2σ_j²(t-s)} f(s)² ds`.
pub fn analytic_variance_trace(
    p: &ForwardProblem,
    spec: &QWienerSpec,
    schedule: NoiseSchedule,
    t: f64,
    quad_points: usize,
) -> Result<f64> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(SarError::config(format!("time must be non-negative, got {t}")));
    }
    schedule.validate()?;
    check_dim(p.rank(), spec.len())?;
    if quad_points < DEFAULT_QUAD_POINTS {
        return Err(SarError::config(format!("need at least 16 quadrature points, got {quad_points}")));
    }
    p.eigenvalues()
        .iter()
        .zip(&spec.q)
        .filter(|(_, q)| **q > 0.0)
        .map(|(l, q)| Ok(q * schedule.damped_energy(*l, t, quad_points)?))
        .sum()
}

/// `k` Landweber iterations `x ← x + dt A*(y^δ - A x)` on the grid.
pub fn landweber_iterate(
    p: &ForwardProblem,
    y_delta: &DVector<f64>,
    x0: &DVector<f64>,
    dt: f64,
    k: usize,
) -> Result<DVector<f64>> {
    check_dim(p.range_dim(), y_delta.len())?;
    check_dim(p.domain_dim(), x0.len())?;
    let limit = 2.0 / p.norm().powi(2);
    if !(dt > 0.0 && dt < limit) {
        return Err(SarError::config(format!("Landweber step dt = {dt} outside (0, {limit})")));
    }
    let mut x = x0.clone();
    for _ in 0..k {
        let r = y_delta - p.apply_forward(&x)?;
        x += p.apply_adjoint(&r)? * dt;
    }
    Ok(x)
}
