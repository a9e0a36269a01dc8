//! Q-Wiener covariance specs, reproducible random streams, and data noise.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, SarError};
use crate::spectral::ForwardProblem;

/// Offset separating data-noise streams from path streams.
const DATA_STREAM_BASE: u64 = 1 << 63;

/// Position of one random stream: `(master_seed, path_index)` fixes the whole
/// stream, `step_counter` selects the block used by a single time step.
///
/// Each `(master_seed, path_index, step_counter)` triple maps to a disjoint
/// block of a counter-based ChaCha stream, so draws do not depend on the
/// order in which paths or steps are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngLineage {
    pub master_seed: u64,
    pub path_index: u64,
    pub step_counter: u64,
}

impl RngLineage {
    pub fn new(master_seed: u64, path_index: u64) -> Self {
        Self { master_seed, path_index, step_counter: 0 }
    }

    /// Stream reserved for the `realization`-th data-noise draw.
    pub fn data_noise(master_seed: u64, realization: u64) -> Self {
        Self::new(master_seed, DATA_STREAM_BASE.wrapping_add(realization))
    }

    pub fn at_step(self, step_counter: u64) -> Self {
        Self { step_counter, ..self }
    }

    pub fn advanced(self) -> Self {
        self.at_step(self.step_counter + 1)
    }

    /// Generator positioned at the start of this lineage's block.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.path_index);
        rng.set_word_pos(u128::from(self.step_counter) << 32);
        rng
    }

    /// `count` standard normals; entry `j` belongs to mode `j`.
    pub fn normals(&self, count: usize) -> Vec<f64> {
        let mut out = vec![0.0; count];
        self.fill_normals(&mut out);
        out
    }

    pub fn fill_normals(&self, out: &mut [f64]) {
        let mut rng = self.rng();
        out.iter_mut().for_each(|z| *z = rng.sample(StandardNormal));
    }
}

/// Parametric families for the covariance eigenvalues `q_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QFamily {
    /// `q_j = c j^{-α}`.
    Power { alpha: f64, c: f64 },
    /// Explicit eigenvalues, one per retained mode.
    Custom { q: Vec<f64> },
    /// `q_j = c (σ_j/σ_1)² j^{-β}`, so that `q_j/σ_j² = (c/σ_1²) j^{-β}` for
    /// any spectrum. Useful for operators with exponentially decaying σ_j.
    Scaled { c: f64, beta: f64 },
}

impl Default for QFamily {
    fn default() -> Self {
        QFamily::Power { alpha: 6.0, c: 1.0 }
    }
}

/// Covariance eigenvalues aligned with the right singular vectors `u_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QWienerSpec {
    pub q: Vec<f64>,
    /// `Σ q_j / σ_j²`, the trace of `Q (A*A)^{-1}`.
    pub trace_weighted: f64,
}

impl QWienerSpec {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Trace of `Q` itself.
    pub fn trace(&self) -> f64 {
        self.q.iter().sum()
    }

    /// A spec with every `q_j = 0`.
    pub fn zero(rank: usize) -> Self {
        Self { q: vec![0.0; rank], trace_weighted: 0.0 }
    }
}

/// Smallest fitted tail decay exponent of `q_j/σ_j²` that is accepted.
/// Exactly `j^{-1}` diverges only logarithmically; the slack absorbs
/// regression noise on short spectra.
const MIN_TAIL_DECAY: f64 = 0.9;

pub fn make_qwiener(p: &ForwardProblem, family: &QFamily) -> Result<QWienerSpec> {
    let r = p.rank();
    let sigma = p.singular_values();
    let q: Vec<f64> = match family {
        QFamily::Power { alpha, c } => {
            if !(alpha.is_finite() && c.is_finite() && *c >= 0.0) {
                return Err(SarError::config(format!("invalid power family α = {alpha}, c = {c}")));
            }
            (1..=r).map(|j| c * (j as f64).powf(-alpha)).collect()
        }
        QFamily::Custom { q } => {
            check_dim(r, q.len())?;
            q.clone()
        }
        QFamily::Scaled { c, beta } => {
            if !(beta.is_finite() && c.is_finite() && *c >= 0.0) {
                return Err(SarError::config(format!("invalid scaled family c = {c}, β = {beta}")));
            }
            (0..r)
                .map(|j| c * (sigma[j] / sigma[0]).powi(2) * ((j + 1) as f64).powf(-beta))
                .collect()
        }
    };
    if let Some(j) = q.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(SarError::config(format!("covariance eigenvalue q_{} = {} is invalid", j + 1, q[j])));
    }
    let terms: Vec<f64> = q.iter().zip(sigma.iter()).map(|(qj, s)| qj / (s * s)).collect();
    check_trace_growth(&terms)?;
    let trace_weighted: f64 = terms.iter().sum();
    if !trace_weighted.is_finite() {
        return Err(SarError::config("weighted trace Σ q_j/σ_j² is not finite"));
    }
    Ok(QWienerSpec { q, trace_weighted })
}

/// Rejects term sequences whose upper-half tail does not decay fast enough for
/// the partial sums to stay bounded as the resolution grows.
fn check_trace_growth(terms: &[f64]) -> Result<()> {
    let r = terms.len();
    if terms.iter().filter(|&&a| a > 0.0).count() < 3 {
        return Ok(());
    }
    let tail: Vec<(f64, f64)> = (r / 2..r)
        .filter(|&j| terms[j] > 0.0)
        .map(|j| (((j + 1) as f64).ln(), terms[j].ln()))
        .collect();
    if tail.len() < 3 {
        return Ok(());
    }
    let decay = -least_squares_slope(&tail).0;
    if decay >= MIN_TAIL_DECAY {
        return Ok(());
    }
    let partial = |k: usize| terms[..k].iter().sum::<f64>();
    let growth = (partial(r) / partial((r / 2).max(1))).ln() / 2f64.ln();
    Err(SarError::config(format!(
        "Σ q_j/σ_j² does not converge: tail terms decay like j^-{decay:.3}, \
         partial sums grow by 2^{growth:.3} when the mode count doubles"
    )))
}

/// Ordinary least squares `y ≈ a x + b`, returns `(a, b)`.
pub(crate) fn least_squares_slope(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Per-mode increment `ΔB_j = √(q_j dt) ξ_j` for the lineage's current step.
pub fn sample_increment(spec: &QWienerSpec, lineage: RngLineage, dt: f64) -> Result<DVector<f64>> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(SarError::config(format!("time step must be positive, got {dt}")));
    }
    let z = lineage.normals(spec.len());
    Ok(DVector::from_iterator(
        spec.len(),
        spec.q.iter().zip(z).map(|(q, z)| (q * dt).sqrt() * z),
    ))
}

/// Absolute noise level for a relative level: `level · ‖y‖_w`.
pub fn absolute_delta(p: &ForwardProblem, relative: f64) -> Result<f64> {
    let y = p.require_y_exact()?;
    Ok(relative * p.norm_range(y))
}

/// `y^δ = y + δ e/‖e‖_w` with `e` a standard Gaussian vector on the range grid,
/// so that `‖y^δ - y‖_w = δ`.
pub fn inject_data_noise(p: &ForwardProblem, delta: f64, lineage: RngLineage) -> Result<DVector<f64>> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(SarError::config(format!("noise level must be non-negative, got {delta}")));
    }
    let y = p.require_y_exact()?.clone();
    if delta == 0.0 {
        return Ok(y);
    }
    let mut lineage = lineage;
    loop {
        let e = DVector::from_vec(lineage.normals(p.range_dim()));
        let norm = p.norm_range(&e);
        if norm > 0.0 {
            return Ok(y + e * (delta / norm));
        }
        lineage = lineage.advanced();
    }
}
