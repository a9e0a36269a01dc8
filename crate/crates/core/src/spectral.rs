//! Discretized compact operators and their singular systems.
//!
//! A [`ForwardProblem`] holds a quadrature-weighted matrix `M` with
//! `(A x)(s_i) ≈ Σ_k M_ik x_k`. Inner products on the domain and range carry
//! the quadrature weights, so the singular vectors are orthonormal in the
//! discrete `L²` sense rather than the Euclidean one.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, SarError};
use crate::noise::RngLineage;

/// Singular values below this fraction of `σ_1` are discarded.
pub const TRUNCATION_RATIO: f64 = 1e-12;

/// `(1 - e^{-z}) / z`, continuous at `z = 0`.
pub fn expm1_ratio(z: f64) -> f64 {
    if z < 1e-8 {
        1.0 - z / 2.0 + z * z / 6.0 - z * z * z / 24.0
    } else {
        -(-z).exp_m1() / z
    }
}

/// Filter function `g(t, λ) = (1 - e^{-λ t}) / λ`.
pub fn filter_g(t: f64, lambda: f64) -> f64 {
    t * expm1_ratio(lambda * t)
}

/// Residual function `r(t, λ) = 1 - λ g(t, λ) = e^{-λ t}`.
pub fn filter_r(t: f64, lambda: f64) -> f64 {
    (-lambda * t).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureRule {
    /// Composite midpoint rule, nodes at cell centres.
    Midpoint,
    /// Composite trapezoidal rule, nodes at cell edges including 0 and 1.
    Trapezoid,
}

impl QuadratureRule {
    pub fn nodes_and_weights(self, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if n < 2 {
            return Err(SarError::config(format!("quadrature needs at least 2 nodes, got {n}")));
        }
        let (nodes, weights) = match self {
            QuadratureRule::Midpoint => {
                let h = 1.0 / n as f64;
                ((0..n).map(|i| (i as f64 + 0.5) * h).collect(), vec![h; n])
            }
            QuadratureRule::Trapezoid => {
                let h = 1.0 / (n - 1) as f64;
                let nodes = (0..n).map(|i| i as f64 * h).collect();
                let mut w = vec![h; n];
                w[0] = h / 2.0;
                w[n - 1] = h / 2.0;
                (nodes, w)
            }
        };
        Ok((nodes, weights))
    }
}

/// Tensor-product layout of a flattened 2-D domain grid. Node `(i, j)` sits at
/// flat index `i * axis1.len() + j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2d {
    pub axis0: Vec<f64>,
    pub axis1: Vec<f64>,
}

impl Grid2d {
    pub fn len(&self) -> usize {
        self.axis0.len() * self.axis1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.axis0.len(), self.axis1.len())
    }

    pub fn coords(&self, flat: usize) -> (f64, f64) {
        let n1 = self.axis1.len();
        (self.axis0[flat / n1], self.axis1[flat % n1])
    }
}

/// Smoothness family for range-type source conditions `x0 - x† = φ(A*A) v`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceFamily {
    /// `φ(λ) = λ^p`.
    Holder { p: f64 },
    /// `φ(λ) = log^{-μ}(1/λ)` for `λ ≤ e^{-μ-1}`, continued by its tangent line beyond.
    Logarithmic { mu: f64 },
}

impl SourceFamily {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SourceFamily::Holder { p } if p.is_finite() && p >= 0.0 => Ok(()),
            SourceFamily::Logarithmic { mu } if mu.is_finite() && mu > 0.0 => Ok(()),
            other => Err(SarError::config(format!("invalid source family {other:?}"))),
        }
    }

    pub fn phi(&self, lambda: f64) -> f64 {
        match *self {
            SourceFamily::Holder { p } => {
                if p == 0.0 {
                    1.0
                } else {
                    lambda.max(0.0).powf(p)
                }
            }
            SourceFamily::Logarithmic { mu } => {
                if lambda <= 0.0 {
                    return 0.0;
                }
                let knot = (-mu - 1.0).exp();
                if lambda <= knot {
                    (1.0 / lambda).ln().powf(-mu)
                } else {
                    // tangent at the knot, where log(1/λ) = μ + 1
                    let value = (mu + 1.0).powf(-mu);
                    let slope = mu * (mu + 1.0).powf(-mu - 1.0) / knot;
                    value + slope * (lambda - knot)
                }
            }
        }
    }

    /// Rate exponent `4p/(2p+1)` of the mean-square error for the Hölder family.
    pub fn holder_mse_exponent(&self) -> Option<f64> {
        match *self {
            SourceFamily::Holder { p } => Some(4.0 * p / (2.0 * p + 1.0)),
            SourceFamily::Logarithmic { .. } => None,
        }
    }
}

/// How the random source element `v` is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceDraw {
    /// Random signs with mode magnitudes chosen so that the spectral tail of
    /// `φ(A*A) v` tracks `ρ² φ(λ)²` across the resolved spectrum.
    #[default]
    Sharp,
    /// Independent Gaussian coefficients, equal variance per mode.
    White,
}

/// Tabulated scalar function of the eigenvalues `λ_j = σ_j²` of `A*A`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFunctionTable {
    pub lambdas: Vec<f64>,
    pub values: Vec<f64>,
}

impl SpectralFunctionTable {
    pub fn evaluate(problem: &ForwardProblem, f: impl Fn(f64) -> f64) -> Result<Self> {
        let lambdas = problem.eigenvalues();
        let values: Vec<f64> = lambdas.iter().map(|&l| f(l)).collect();
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(SarError::Domain(format!(
                "spectral function not finite at λ = {:e}",
                lambdas[bad]
            )));
        }
        Ok(Self { lambdas, values })
    }

    pub fn g(problem: &ForwardProblem, t: f64) -> Result<Self> {
        Self::evaluate(problem, |l| filter_g(t, l))
    }

    pub fn r(problem: &ForwardProblem, t: f64) -> Result<Self> {
        Self::evaluate(problem, |l| filter_r(t, l))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Discretized forward operator with cached singular system.
#[derive(Clone, Debug)]
pub struct ForwardProblem {
    matrix: DMatrix<f64>,
    weights_domain: DVector<f64>,
    weights_range: DVector<f64>,
    grid_domain: DVector<f64>,
    grid_range: DVector<f64>,
    grid2d: Option<Grid2d>,
    singular_values: DVector<f64>,
    /// `v_j` as columns, `m × r`.
    left_vectors: DMatrix<f64>,
    /// `u_j` as columns, `n × r`.
    right_vectors: DMatrix<f64>,
    x_true: Option<DVector<f64>>,
    y_exact: Option<DVector<f64>>,
}

/// Nyström discretization of `(A x)(s) = ∫_0^1 K(s, t) x(t) dt`.
pub fn discretize_kernel(
    kernel: impl Fn(f64, f64) -> f64,
    n: usize,
    m: usize,
    rule: QuadratureRule,
) -> Result<ForwardProblem> {
    let (t_nodes, t_weights) = rule.nodes_and_weights(n)?;
    let (s_nodes, s_weights) = rule.nodes_and_weights(m)?;
    let mut matrix = DMatrix::zeros(m, n);
    for i in 0..m {
        for k in 0..n {
            let value = kernel(s_nodes[i], t_nodes[k]);
            if !value.is_finite() {
                return Err(SarError::Domain(format!(
                    "kernel not finite at (s, t) = ({}, {})",
                    s_nodes[i], t_nodes[k]
                )));
            }
            matrix[(i, k)] = value * t_weights[k];
        }
    }
    ForwardProblem::new(
        matrix,
        DVector::from_vec(t_weights),
        DVector::from_vec(s_weights),
        DVector::from_vec(t_nodes),
        DVector::from_vec(s_nodes),
    )
}

fn validate_weights(w: &DVector<f64>, side: &str) -> Result<()> {
    if let Some(i) = w.iter().position(|&x| !(x.is_finite() && x > 0.0)) {
        return Err(SarError::config(format!(
            "{side} quadrature weight {i} is {} (must be positive)",
            w[i]
        )));
    }
    Ok(())
}

impl ForwardProblem {
    /// Builds a problem from an already weighted matrix and computes its
    /// weighted singular system.
    pub fn new(
        matrix: DMatrix<f64>,
        weights_domain: DVector<f64>,
        weights_range: DVector<f64>,
        grid_domain: DVector<f64>,
        grid_range: DVector<f64>,
    ) -> Result<Self> {
        let (m, n) = matrix.shape();
        check_dim(n, weights_domain.len())?;
        check_dim(m, weights_range.len())?;
        check_dim(n, grid_domain.len())?;
        check_dim(m, grid_range.len())?;
        validate_weights(&weights_domain, "domain")?;
        validate_weights(&weights_range, "range")?;
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(SarError::Domain("operator matrix has non-finite entries".into()));
        }

        let sqrt_wd = weights_domain.map(f64::sqrt);
        let sqrt_wr = weights_range.map(f64::sqrt);
        let mut scaled = matrix.clone();
        for i in 0..m {
            for k in 0..n {
                scaled[(i, k)] *= sqrt_wr[i] / sqrt_wd[k];
            }
        }

        let svd = scaled.svd(true, true);
        let u = svd.u.ok_or_else(|| SarError::numerical("SVD did not return left vectors"))?;
        let v_t = svd
            .v_t
            .ok_or_else(|| SarError::numerical("SVD did not return right vectors"))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

        let sigma_max = order.first().map(|&i| svd.singular_values[i]).unwrap_or(0.0);
        if !(sigma_max > 0.0) {
            return Err(SarError::Domain(
                "operator has no positive singular values (rank 0)".into(),
            ));
        }
        let kept: Vec<usize> = order
            .into_iter()
            .filter(|&i| svd.singular_values[i] >= TRUNCATION_RATIO * sigma_max)
            .collect();
        let r = kept.len();

        let singular_values = DVector::from_iterator(r, kept.iter().map(|&i| svd.singular_values[i]));
        let mut left_vectors = DMatrix::zeros(m, r);
        let mut right_vectors = DMatrix::zeros(n, r);
        for (j, &idx) in kept.iter().enumerate() {
            for i in 0..m {
                left_vectors[(i, j)] = u[(i, idx)] / sqrt_wr[i];
            }
            for k in 0..n {
                right_vectors[(k, j)] = v_t[(idx, k)] / sqrt_wd[k];
            }
        }

        Ok(Self {
            matrix,
            weights_domain,
            weights_range,
            grid_domain,
            grid_range,
            grid2d: None,
            singular_values,
            left_vectors,
            right_vectors,
            x_true: None,
            y_exact: None,
        })
    }

    pub fn with_grid2d(mut self, grid: Grid2d) -> Result<Self> {
        check_dim(self.domain_dim(), grid.len())?;
        self.grid2d = Some(grid);
        Ok(self)
    }

    pub fn domain_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn range_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn weights_domain(&self) -> &DVector<f64> {
        &self.weights_domain
    }

    pub fn weights_range(&self) -> &DVector<f64> {
        &self.weights_range
    }

    pub fn grid_domain(&self) -> &DVector<f64> {
        &self.grid_domain
    }

    pub fn grid_range(&self) -> &DVector<f64> {
        &self.grid_range
    }

    pub fn grid2d(&self) -> Option<&Grid2d> {
        self.grid2d.as_ref()
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    /// Eigenvalues `λ_j = σ_j²` of `A*A`, non-increasing.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.singular_values.iter().map(|s| s * s).collect()
    }

    /// Operator norm `‖A‖ = σ_1`.
    pub fn norm(&self) -> f64 {
        self.singular_values[0]
    }

    pub fn left_vectors(&self) -> &DMatrix<f64> {
        &self.left_vectors
    }

    pub fn right_vectors(&self) -> &DMatrix<f64> {
        &self.right_vectors
    }

    pub fn x_true(&self) -> Option<&DVector<f64>> {
        self.x_true.as_ref()
    }

    pub fn y_exact(&self) -> Option<&DVector<f64>> {
        self.y_exact.as_ref()
    }

    pub(crate) fn require_x_true(&self) -> Result<&DVector<f64>> {
        self.x_true
            .as_ref()
            .ok_or_else(|| SarError::Unsupported("problem has no exact solution x†".into()))
    }

    pub(crate) fn require_y_exact(&self) -> Result<&DVector<f64>> {
        self.y_exact
            .as_ref()
            .ok_or_else(|| SarError::Unsupported("problem has no exact data".into()))
    }

    /// Sets `x†` and recomputes the exact data as `A x†`.
    pub fn set_true_solution(&mut self, x: DVector<f64>) -> Result<()> {
        check_dim(self.domain_dim(), x.len())?;
        self.y_exact = Some(&self.matrix * &x);
        self.x_true = Some(x);
        Ok(())
    }

    /// Sets `x†` and the exact data independently (e.g. from closed forms).
    pub fn set_true_pair(&mut self, x: DVector<f64>, y: DVector<f64>) -> Result<()> {
        check_dim(self.domain_dim(), x.len())?;
        check_dim(self.range_dim(), y.len())?;
        self.x_true = Some(x);
        self.y_exact = Some(y);
        Ok(())
    }

    pub fn set_exact_data(&mut self, y: DVector<f64>) -> Result<()> {
        check_dim(self.range_dim(), y.len())?;
        self.y_exact = Some(y);
        Ok(())
    }

    pub fn apply_forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.domain_dim(), x.len())?;
        Ok(&self.matrix * x)
    }

    /// Adjoint with respect to the weighted inner products: `A* y = W⁻¹ Mᵀ Ω y`.
    pub fn apply_adjoint(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.range_dim(), y.len())?;
        let weighted = y.component_mul(&self.weights_range);
        let mut out = self.matrix.tr_mul(&weighted);
        out.component_div_assign(&self.weights_domain);
        Ok(out)
    }

    pub fn inner_domain(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .zip(self.weights_domain.iter())
            .map(|((x, y), w)| w * x * y)
            .sum()
    }

    pub fn inner_range(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .zip(self.weights_range.iter())
            .map(|((x, y), w)| w * x * y)
            .sum()
    }

    pub fn norm_domain(&self, x: &DVector<f64>) -> f64 {
        self.inner_domain(x, x).sqrt()
    }

    pub fn norm_range(&self, y: &DVector<f64>) -> f64 {
        self.inner_range(y, y).sqrt()
    }

    /// Coefficients `⟨x, u_j⟩` in the weighted domain inner product.
    pub fn spectral_coefficients(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.domain_dim(), x.len())?;
        Ok(self.right_vectors.tr_mul(&x.component_mul(&self.weights_domain)))
    }

    /// Coefficients `⟨y, v_j⟩` in the weighted range inner product.
    pub fn data_coefficients(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.range_dim(), y.len())?;
        Ok(self.left_vectors.tr_mul(&y.component_mul(&self.weights_range)))
    }

    /// `Σ_j c_j u_j` on the domain grid.
    pub fn synthesize(&self, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.rank(), coeffs.len())?;
        Ok(&self.right_vectors * coeffs)
    }

    /// Spectral tail `ω(λ) = Σ_{σ_j² ≤ λ} ⟨x0 - x†, u_j⟩²`.
    pub fn spectral_tail(&self, x0: &DVector<f64>, lambda: f64) -> Result<f64> {
        let x_true = self.require_x_true()?;
        check_dim(self.domain_dim(), x0.len())?;
        let coeffs = self.spectral_coefficients(&(x0 - x_true))?;
        Ok(coeffs
            .iter()
            .zip(self.singular_values.iter())
            .filter(|(_, s)| *s * *s <= lambda)
            .map(|(c, _)| c * c)
            .sum())
    }

    /// Sets `x† = x0 - φ(A*A) v` for the given coefficients `v_j = ⟨v, u_j⟩`.
    pub fn apply_source(
        &mut self,
        family: SourceFamily,
        x0: &DVector<f64>,
        v_coeffs: &DVector<f64>,
    ) -> Result<()> {
        family.validate()?;
        check_dim(self.domain_dim(), x0.len())?;
        check_dim(self.rank(), v_coeffs.len())?;
        let shifted = DVector::from_iterator(
            self.rank(),
            v_coeffs
                .iter()
                .zip(self.singular_values.iter())
                .map(|(v, s)| family.phi(s * s) * v),
        );
        let x_true = x0 - self.synthesize(&shifted)?;
        self.set_true_solution(x_true)
    }

    /// Draws a random `v` with `‖v‖ = ρ` on the represented modes and sets
    /// `x† = x0 - φ(A*A) v`. Returns the coefficients of `v`.
    pub fn source_condition_solution(
        &mut self,
        family: SourceFamily,
        rho: f64,
        x0: &DVector<f64>,
        draw: SourceDraw,
        lineage: RngLineage,
    ) -> Result<DVector<f64>> {
        family.validate()?;
        if !(rho.is_finite() && rho > 0.0) {
            return Err(SarError::config(format!("source norm bound must be positive, got {rho}")));
        }
        let r = self.rank();
        let lambdas = self.eigenvalues();
        let mut rng = lineage.rng();
        let mut coeffs: Vec<f64> = match draw {
            SourceDraw::White => (0..r).map(|_| rng.sample(StandardNormal)).collect(),
            SourceDraw::Sharp => {
                let profile = sharp_profile(family, &lambdas);
                profile
                    .iter()
                    .map(|w| if rng.random::<bool>() { w.sqrt() } else { -w.sqrt() })
                    .collect()
            }
        };
        let norm = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(SarError::numerical("source draw produced a zero element"));
        }
        coeffs.iter_mut().for_each(|c| *c *= rho / norm);
        let v = DVector::from_vec(coeffs);
        self.apply_source(family, x0, &v)?;
        Ok(v)
    }

    /// Writes the problem, including its singular system, as JSON.
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = ProblemFile::from(self);
        let text = serde_json::to_string(&file).map_err(|e| SarError::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Reads a problem written by [`ForwardProblem::save_json`] without
    /// recomputing the decomposition. The stored singular system is checked
    /// for weighted orthonormality.
    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ProblemFile = serde_json::from_str(&text).map_err(|e| SarError::Parse(e.to_string()))?;
        file.try_into()
    }

    /// Largest deviation of the stored singular vectors from weighted orthonormality.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = |vecs: &DMatrix<f64>, w: &DVector<f64>| {
            let mut scaled = vecs.clone();
            for (mut row, wi) in scaled.row_iter_mut().zip(w.iter()) {
                row *= *wi;
            }
            vecs.tr_mul(&scaled)
        };
        let r = self.rank();
        let id = DMatrix::<f64>::identity(r, r);
        let du = (gram(&self.right_vectors, &self.weights_domain) - &id).amax();
        let dv = (gram(&self.left_vectors, &self.weights_range) - &id).amax();
        du.max(dv)
    }
}

/// Mode energies for a sharp source draw: mode `j` receives
/// `1 - (φ(λ_{j+1}) / φ(λ_j))²`, so that `Σ_{i ≥ j} φ(λ_i)² v_i²` telescopes to
/// roughly `φ(λ_j)²`. The eigenvalue after the last retained one is
/// extrapolated geometrically.
fn sharp_profile(family: SourceFamily, lambdas: &[f64]) -> Vec<f64> {
    let r = lambdas.len();
    let next = |j: usize| -> f64 {
        if j + 1 < r {
            lambdas[j + 1]
        } else if r >= 2 {
            lambdas[r - 1] * (lambdas[r - 1] / lambdas[r - 2])
        } else {
            lambdas[0] / 2.0
        }
    };
    let profile: Vec<f64> = (0..r)
        .map(|j| {
            let here = family.phi(lambdas[j]);
            if here > 0.0 {
                (1.0 - (family.phi(next(j)) / here).powi(2)).max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    if profile.iter().sum::<f64>() > 1e-12 {
        profile
    } else {
        vec![1.0; r]
    }
}

#[derive(Serialize, Deserialize)]
struct ProblemFile {
    format: String,
    rows: usize,
    cols: usize,
    rank: usize,
    matrix: Vec<f64>,
    weights_domain: Vec<f64>,
    weights_range: Vec<f64>,
    grid_domain: Vec<f64>,
    grid_range: Vec<f64>,
    grid2d: Option<Grid2d>,
    singular_values: Vec<f64>,
    left_vectors: Vec<f64>,
    right_vectors: Vec<f64>,
    x_true: Option<Vec<f64>>,
    y_exact: Option<Vec<f64>>,
}

const PROBLEM_FORMAT: &str = "sar-problem/1";

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    check_dim(rows * cols, data.len())?;
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

impl From<&ForwardProblem> for ProblemFile {
    fn from(p: &ForwardProblem) -> Self {
        Self {
            format: PROBLEM_FORMAT.to_string(),
            rows: p.range_dim(),
            cols: p.domain_dim(),
            rank: p.rank(),
            matrix: row_major(&p.matrix),
            weights_domain: p.weights_domain.as_slice().to_vec(),
            weights_range: p.weights_range.as_slice().to_vec(),
            grid_domain: p.grid_domain.as_slice().to_vec(),
            grid_range: p.grid_range.as_slice().to_vec(),
            grid2d: p.grid2d.clone(),
            singular_values: p.singular_values.as_slice().to_vec(),
            left_vectors: row_major(&p.left_vectors),
            right_vectors: row_major(&p.right_vectors),
            x_true: p.x_true.as_ref().map(|x| x.as_slice().to_vec()),
            y_exact: p.y_exact.as_ref().map(|y| y.as_slice().to_vec()),
        }
    }
}

impl TryFrom<ProblemFile> for ForwardProblem {
    type Error = SarError;

    fn try_from(f: ProblemFile) -> Result<Self> {
        if f.format != PROBLEM_FORMAT {
            return Err(SarError::Parse(format!("unknown problem format {:?}", f.format)));
        }
        let (m, n, r) = (f.rows, f.cols, f.rank);
        check_dim(n, f.weights_domain.len())?;
        check_dim(m, f.weights_range.len())?;
        check_dim(r, f.singular_values.len())?;
        let problem = ForwardProblem {
            matrix: from_row_major(m, n, &f.matrix)?,
            weights_domain: DVector::from_vec(f.weights_domain),
            weights_range: DVector::from_vec(f.weights_range),
            grid_domain: DVector::from_vec(f.grid_domain),
            grid_range: DVector::from_vec(f.grid_range),
            grid2d: f.grid2d,
            singular_values: DVector::from_vec(f.singular_values),
            left_vectors: from_row_major(m, r, &f.left_vectors)?,
            right_vectors: from_row_major(n, r, &f.right_vectors)?,
            x_true: f.x_true.map(DVector::from_vec),
            y_exact: f.y_exact.map(DVector::from_vec),
        };
        check_dim(n, problem.grid_domain.len())?;
        check_dim(m, problem.grid_range.len())?;
        validate_weights(&problem.weights_domain, "domain")?;
        validate_weights(&problem.weights_range, "range")?;
        if let Some(x) = &problem.x_true {
            check_dim(n, x.len())?;
        }
        if let Some(y) = &problem.y_exact {
            check_dim(m, y.len())?;
        }
        let s = &problem.singular_values;
        if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) || s.as_slice().windows(2).any(|w| w[1] > w[0]) {
            return Err(SarError::Parse("stored singular values must be positive and non-increasing".into()));
        }
        let defect = problem.orthonormality_defect();
        if defect > 1e-8 {
            return Err(SarError::Parse(format!(
                "stored singular vectors are not orthonormal (defect {defect:e})"
            )));
        }
        Ok(problem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn green(s: f64, t: f64) -> f64 {
        if s <= t {
            s * (1.0 - t)
        } else {
            t * (1.0 - s)
        }
    }

    #[test]
    fn green_kernel_leading_singular_value() {
        let p = discretize_kernel(green, 100, 100, QuadratureRule::Midpoint).unwrap();
        let s = p.singular_values();
        assert!((s[0] - 1.0 / (PI * PI)).abs() < 1e-3);
        for j in 1..=4 {
            let analytic = 1.0 / (j as f64 * PI).powi(2);
            assert!((s[j - 1] - analytic).abs() / analytic < 1e-2, "mode {j}");
        }
        assert!(s.as_slice().windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn singular_system_identities() {
        let p = discretize_kernel(green, 60, 50, QuadratureRule::Trapezoid).unwrap();
        assert!(p.orthonormality_defect() < 1e-10);
        let s1 = p.norm();
        for j in 0..p.rank() {
            let u = p.right_vectors().column(j).into_owned();
            let v = p.left_vectors().column(j).into_owned();
            let au = p.apply_forward(&u).unwrap();
            let atv = p.apply_adjoint(&v).unwrap();
            let sj = p.singular_values()[j];
            assert!((au - &v * sj).amax() < 1e-8 * s1);
            assert!((atv - &u * sj).amax() < 1e-8 * s1);
        }
        // reconstruction M = Σ σ_j v_j (W u_j)^T
        let mut recon = DMatrix::zeros(p.range_dim(), p.domain_dim());
        for j in 0..p.rank() {
            let v = p.left_vectors().column(j);
            let wu = p.right_vectors().column(j).component_mul(p.weights_domain());
            recon += v * wu.transpose() * p.singular_values()[j];
        }
        assert!((recon - p.matrix()).amax() < 1e-8 * s1);
    }

    #[test]
    fn zero_kernel_is_rank_zero() {
        let err = discretize_kernel(|_, _| 0.0, 10, 10, QuadratureRule::Midpoint).unwrap_err();
        assert!(matches!(err, SarError::Domain(_)));
    }

    #[test]
    fn constant_kernel_is_rank_one() {
        let p = discretize_kernel(|_, _| 1.0, 50, 50, QuadratureRule::Midpoint).unwrap();
        let s = p.singular_values();
        let above = s.iter().filter(|&&v| v > 1e-10 * s[0]).count();
        assert_eq!(above, 1);
        assert!((s[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_kernel_is_domain_error() {
        let err = discretize_kernel(|s, _| 1.0 / (s - s), 4, 4, QuadratureRule::Midpoint).unwrap_err();
        assert!(matches!(err, SarError::Domain(_)));
    }

    #[test]
    fn too_few_nodes_is_config_error() {
        assert!(matches!(
            discretize_kernel(green, 1, 5, QuadratureRule::Midpoint),
            Err(SarError::Config(_))
        ));
    }

    #[test]
    fn zero_weight_is_config_error() {
        let m = DMatrix::identity(3, 3);
        let err = ForwardProblem::new(
            m,
            DVector::from_vec(vec![1.0, 0.0, 1.0]),
            DVector::from_element(3, 1.0),
            DVector::zeros(3),
            DVector::zeros(3),
        )
        .unwrap_err();
        assert!(matches!(err, SarError::Config(_)));
    }

    #[test]
    fn coefficients_of_a_singular_vector() {
        let p = discretize_kernel(green, 40, 40, QuadratureRule::Midpoint).unwrap();
        let u2 = p.right_vectors().column(1).into_owned();
        let c = p.spectral_coefficients(&u2).unwrap();
        for (j, cj) in c.iter().enumerate() {
            let want = if j == 1 { 1.0 } else { 0.0 };
            assert!((cj - want).abs() < 1e-10);
        }
        assert_eq!(p.spectral_coefficients(&DVector::zeros(40)).unwrap().amax(), 0.0);
        assert!(matches!(
            p.spectral_coefficients(&DVector::zeros(3)),
            Err(SarError::Dimension { expected: 40, got: 3 })
        ));
    }

    #[test]
    fn logarithmic_phi_is_continuous_index_function() {
        for mu in [0.5, 1.0, 2.0] {
            let f = SourceFamily::Logarithmic { mu };
            let knot = (-mu - 1.0f64).exp();
            let below = f.phi(knot * (1.0 - 1e-9));
            let above = f.phi(knot * (1.0 + 1e-9));
            assert!((below - above).abs() < 1e-8);
            let mut prev = 0.0;
            for k in 1..400 {
                let l = 10f64.powf(-12.0 + k as f64 * 0.03);
                let v = f.phi(l);
                assert!(v > prev);
                prev = v;
            }
        }
        let f = SourceFamily::Logarithmic { mu: 1.0 };
        assert!((f.phi(1e-4) - 1.0 / (1e4f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn filter_functions() {
        assert!((filter_g(1.0, 1.0) - 0.632_120_558_828_557_7).abs() < 1e-15);
        assert!((filter_g(2.0, 0.0) - 2.0).abs() < 1e-15);
        // series branch agrees with the direct formula near the switch
        for z in [0.9e-8f64, 1.1e-8] {
            let direct = -(-z).exp_m1() / z;
            assert!((expm1_ratio(z) - direct).abs() < 1e-15);
        }
        assert_eq!(filter_r(0.0, 3.0), 1.0);
        let table = SpectralFunctionTable::g(
            &discretize_kernel(green, 20, 20, QuadratureRule::Midpoint).unwrap(),
            5.0,
        )
        .unwrap();
        assert_eq!(table.len(), table.lambdas.len());
    }
}
