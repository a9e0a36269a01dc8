//! Built-in test problems.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::spectral::{discretize_kernel, ForwardProblem, Grid2d, QuadratureRule};

/// Green's function of `-d²/ds²` on `[0, 1]` with Dirichlet conditions.
pub fn green_kernel(s: f64, t: f64) -> f64 {
    if s <= t {
        s * (1.0 - t)
    } else {
        t * (1.0 - s)
    }
}

/// Exact solution of the toy problem, `-y''` for [`toy_data`].
pub fn toy_solution(t: f64) -> f64 {
    -6.0 * t * t * (1.0 - t) * (2.0 - 8.0 * t + 7.0 * t * t)
}

/// Exact data of the toy problem, `s⁴ (1 - s)³`.
pub fn toy_data(s: f64) -> f64 {
    s.powi(4) * (1.0 - s).powi(3)
}

/// Green's-kernel problem on an `n`-point midpoint grid with the closed-form
/// solution and data attached.
pub fn make_toy_problem(n: usize) -> Result<ForwardProblem> {
    if n < 10 {
        return Err(SarError::config(format!("toy problem needs n ≥ 10, got {n}")));
    }
    let mut p = discretize_kernel(green_kernel, n, n, QuadratureRule::Midpoint)?;
    let x = p.grid_domain().map(toy_solution);
    let y = p.grid_range().map(toy_data);
    p.set_true_pair(x, y)?;
    Ok(p)
}

/// Uniform axis in log10 coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogAxis {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
}

impl LogAxis {
    pub fn points(&self) -> Vec<f64> {
        if self.nodes == 1 {
            return vec![self.min];
        }
        let h = self.spacing();
        (0..self.nodes).map(|i| self.min + i as f64 * h).collect()
    }

    /// Node spacing; a single-node axis is treated as unit width.
    pub fn spacing(&self) -> f64 {
        if self.nodes <= 1 {
            1.0
        } else {
            (self.max - self.min) / (self.nodes - 1) as f64
        }
    }

    /// Index of the node nearest to `x`.
    pub fn nearest(&self, x: f64) -> usize {
        let raw = ((x - self.min) / self.spacing()).round();
        raw.clamp(0.0, (self.nodes - 1) as f64) as usize
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.nodes == 0 || (self.nodes > 1 && self.max <= self.min) {
            return Err(SarError::config(format!("invalid {name} axis {self:?}")));
        }
        Ok(())
    }
}

/// Experimental design of a multi-concentration sensorgram series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiosensorConfig {
    /// Analyte concentrations in mol/L.
    pub concentrations: Vec<f64>,
    /// Injection start (s).
    pub t0: f64,
    /// Injection duration (s).
    pub t_inj: f64,
    /// Detector delay (s).
    pub dt_delay: f64,
    /// Sampling times (s), strictly increasing.
    pub time_grid: Vec<f64>,
    /// `log10 k_d` axis, `k_d` in 1/s.
    pub log_kd: LogAxis,
    /// `log10 k_a` axis, `k_a` in 1/(M·s).
    pub log_ka: LogAxis,
}

impl Default for BiosensorConfig {
    fn default() -> Self {
        let levels = 9;
        let (c_lo, c_hi): (f64, f64) = (1214e-9, 14571e-9);
        let concentrations = (0..levels)
            .map(|i| c_lo * (c_hi / c_lo).powf(i as f64 / (levels - 1) as f64))
            .collect();
        let t_inj = 300.0;
        let mut time_grid: Vec<f64> = (0..=100).map(|i| t_inj * i as f64 / 100.0).collect();
        let (d_lo, d_hi): (f64, f64) = (2.0, 5700.0);
        time_grid.extend((0..100).map(|i| t_inj + d_lo * (d_hi / d_lo).powf(i as f64 / 99.0)));
        Self {
            concentrations,
            t0: 0.0,
            t_inj,
            dt_delay: 0.0,
            time_grid,
            log_kd: LogAxis { min: -4.0, max: 0.0, nodes: 40 },
            log_ka: LogAxis { min: 3.0, max: 7.0, nodes: 40 },
        }
    }
}

impl BiosensorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_inj.is_finite() && self.t_inj > 0.0) {
            return Err(SarError::config(format!("injection duration must be positive, got {}", self.t_inj)));
        }
        if !(self.t0.is_finite() && self.dt_delay.is_finite() && self.dt_delay >= 0.0) {
            return Err(SarError::config("injection start and detector delay must be finite, delay ≥ 0"));
        }
        if self.concentrations.is_empty() || self.concentrations.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(SarError::config("concentrations must be positive"));
        }
        if self.time_grid.is_empty()
            || self.time_grid.iter().any(|t| !t.is_finite())
            || self.time_grid.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(SarError::config("time grid must be finite and strictly increasing"));
        }
        self.log_kd.validate("log10 k_d")?;
        self.log_ka.validate("log10 k_a")?;
        Ok(())
    }

    /// Trapezoid weights on the time grid (unit weight for a single sample).
    pub fn time_weights(&self) -> Vec<f64> {
        let t = &self.time_grid;
        if t.len() == 1 {
            return vec![1.0];
        }
        let mut w = vec![0.0; t.len()];
        for (k, pair) in t.windows(2).enumerate() {
            let h = pair[1] - pair[0];
            w[k] += h / 2.0;
            w[k + 1] += h / 2.0;
        }
        w
    }

    pub fn grid(&self) -> Grid2d {
        Grid2d { axis0: self.log_kd.points(), axis1: self.log_ka.points() }
    }

    /// Size of the jump of [`biosensor_kernel`] at the end of the injection
    /// window, `R(t_s⁺) - R(t_s)` with `t_s = t0 + t_inj + Δt`.
    pub fn phase_jump(&self, c: f64, k_a: f64, k_d: f64) -> f64 {
        let t_s = self.t0 + self.t_inj + self.dt_delay;
        let left = biosensor_kernel(t_s, c, k_a, k_d, self);
        let plateau = k_a * c / (k_d + k_a * c);
        let right = plateau * (-(-(k_d + k_a * c) * self.t_inj).exp_m1()) * (-k_d * (t_s - self.t0 - self.t_inj)).exp();
        right - left
    }
}

/// Normalized sensor response of a single `(k_a, k_d)` interaction at
/// concentration `c` and time `t`, following the printed piecewise form:
/// zero before `t0 + Δt`, association until `t0 + t_inj + Δt`, then
/// dissociation. With `Δt > 0` the two branches do not meet at the switch.
pub fn biosensor_kernel(t: f64, c: f64, k_a: f64, k_d: f64, cfg: &BiosensorConfig) -> f64 {
    let start = cfg.t0 + cfg.dt_delay;
    if t <= start {
        return 0.0;
    }
    let rate = k_d + k_a * c;
    let plateau = k_a * c / rate;
    if t <= start + cfg.t_inj {
        plateau * (-(-rate * (t - cfg.t0)).exp_m1())
    } else {
        plateau * (-(-rate * cfg.t_inj).exp_m1()) * (-k_d * (t - cfg.t0 - cfg.t_inj)).exp()
    }
}

/// Stacked sensorgram operator. Rows run over concentrations, then sampling
/// times; columns over the `(log10 k_d, log10 k_a)` grid with `k_a` fastest.
pub fn make_biosensor_problem(cfg: &BiosensorConfig) -> Result<ForwardProblem> {
    cfg.validate()?;
    let grid = cfg.grid();
    let n = grid.len();
    let nt = cfg.time_grid.len();
    let m = cfg.concentrations.len() * nt;
    let cell = cfg.log_kd.spacing() * cfg.log_ka.spacing();
    let tw = cfg.time_weights();
    let mut matrix = DMatrix::zeros(m, n);
    for col in 0..n {
        let (lkd, lka) = grid.coords(col);
        let (k_d, k_a) = (10f64.powf(lkd), 10f64.powf(lka));
        for (ci, &c) in cfg.concentrations.iter().enumerate() {
            for (ti, &t) in cfg.time_grid.iter().enumerate() {
                matrix[(ci * nt + ti, col)] = biosensor_kernel(t, c, k_a, k_d, cfg) * cell;
            }
        }
    }
    let weights_range = DVector::from_iterator(m, (0..m).map(|i| tw[i % nt]));
    let grid_range = DVector::from_iterator(m, (0..m).map(|i| cfg.time_grid[i % nt]));
    let grid_domain = DVector::from_iterator(n, (0..n).map(|i| i as f64));
    let p = ForwardProblem::new(matrix, DVector::from_element(n, cell), weights_range, grid_domain, grid_range)
        .map_err(|e| match e {
            SarError::Domain(msg) => SarError::config(format!("biosensor operator collapsed: {msg}")),
            other => other,
        })?;
    p.with_grid2d(grid)
}

/// Isotropic Gaussian bump in `(log10 k_d, log10 k_a)` coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub log_kd: f64,
    pub log_ka: f64,
    pub height: f64,
    pub width: f64,
}

/// Synthetic rate-constant map made of Gaussian bumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiosensorTruth {
    pub bumps: Vec<Bump>,
}

impl Default for BiosensorTruth {
    fn default() -> Self {
        Self::two_peaks()
    }
}

impl BiosensorTruth {
    pub fn two_peaks() -> Self {
        let bump = |log_kd, log_ka| Bump { log_kd, log_ka, height: 1.0, width: 0.25 };
        Self { bumps: vec![bump(-0.9, 4.4), bump(-3.5, 3.9)] }
    }

    pub fn evaluate(&self, grid: &Grid2d) -> DVector<f64> {
        DVector::from_iterator(
            grid.len(),
            (0..grid.len()).map(|i| {
                let (a, b) = grid.coords(i);
                self.bumps
                    .iter()
                    .map(|bp| {
                        let r2 = (a - bp.log_kd).powi(2) + (b - bp.log_ka).powi(2);
                        bp.height * (-r2 / (2.0 * bp.width * bp.width)).exp()
                    })
                    .sum()
            }),
        )
    }

    /// Grid indices `(i_kd, i_ka)` nearest to each bump centre.
    pub fn peak_nodes(&self, cfg: &BiosensorConfig) -> Vec<(usize, usize)> {
        self.bumps
            .iter()
            .map(|b| (cfg.log_kd.nearest(b.log_kd), cfg.log_ka.nearest(b.log_ka)))
            .collect()
    }

    /// Attaches this map as `x†` and recomputes the exact data.
    pub fn attach(&self, p: &mut ForwardProblem) -> Result<()> {
        let grid = p
            .grid2d()
            .ok_or_else(|| SarError::Unsupported("problem has no 2-D domain grid".into()))?
            .clone();
        p.set_true_solution(self.evaluate(&grid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn closed_forms() {
        assert!((toy_solution(0.5) - 0.1875).abs() < 1e-15);
        assert!((toy_data(0.5) - 0.0078125).abs() < 1e-15);
        // x† = -y''
        for k in 1..20 {
            let s = k as f64 / 20.0;
            let h = 1e-4;
            let second = (toy_data(s + h) - 2.0 * toy_data(s) + toy_data(s - h)) / (h * h);
            assert!((toy_solution(s) + second).abs() < 1e-6);
        }
    }

    #[test]
    fn toy_forward_consistency_improves_with_refinement() {
        let rel = |n| {
            let p = make_toy_problem(n).unwrap();
            let y = p.y_exact().unwrap();
            let ax = p.apply_forward(p.x_true().unwrap()).unwrap();
            p.norm_range(&(ax - y)) / p.norm_range(y)
        };
        let (a, b) = (rel(50), rel(100));
        assert!(b <= 5e-3);
        assert!(b < a);
    }

    #[test]
    fn toy_sigma1_converges() {
        let gap = |n| (make_toy_problem(n).unwrap().norm() - 1.0 / (PI * PI)).abs();
        let (a, b, c) = (gap(25), gap(50), gap(100));
        assert!(a > b && b > c && c < 1e-3);
        assert!(make_toy_problem(9).is_err());
    }

    #[test]
    fn kernel_phases() {
        let cfg = BiosensorConfig { dt_delay: 5.0, t0: 10.0, ..BiosensorConfig::default() };
        assert_eq!(biosensor_kernel(15.0, 1e-6, 1e5, 1e-2, &cfg), 0.0);
        let plateau_cfg = BiosensorConfig { t_inj: 1e7, ..BiosensorConfig::default() };
        let v = biosensor_kernel(1e6, 1e-6, 1e5, 1e-2, &plateau_cfg);
        assert!((v - 0.1 / (0.01 + 0.1)).abs() < 1e-12);
        // k_a C = k_d gives plateau 1/2
        let v = biosensor_kernel(1e6, 1e-6, 1e4, 1e-2, &plateau_cfg);
        assert!((v - 0.5).abs() < 1e-12);
        // continuous without delay, jump with delay
        let no_delay = BiosensorConfig::default();
        assert!(no_delay.phase_jump(1e-6, 1e5, 1e-2).abs() < 1e-15);
        assert!(cfg.phase_jump(1e-6, 1e5, 1e-2).abs() > 1e-6);
    }

    #[test]
    fn single_node_operator_is_time_curve() {
        let cfg = BiosensorConfig {
            concentrations: vec![2e-6],
            log_kd: LogAxis { min: -2.0, max: -2.0, nodes: 1 },
            log_ka: LogAxis { min: 5.0, max: 5.0, nodes: 1 },
            ..BiosensorConfig::default()
        };
        let p = make_biosensor_problem(&cfg).unwrap();
        assert_eq!(p.domain_dim(), 1);
        for (k, &t) in cfg.time_grid.iter().enumerate() {
            assert_eq!(p.matrix()[(k, 0)], biosensor_kernel(t, 2e-6, 1e5, 1e-2, &cfg));
        }
    }

    #[test]
    fn biosensor_columns_bounded_and_truth_positive() {
        let cfg = BiosensorConfig {
            log_kd: LogAxis { min: -4.0, max: 0.0, nodes: 8 },
            log_ka: LogAxis { min: 3.0, max: 7.0, nodes: 8 },
            ..BiosensorConfig::default()
        };
        let mut p = make_biosensor_problem(&cfg).unwrap();
        let cell = cfg.log_kd.spacing() * cfg.log_ka.spacing();
        assert!(p.matrix().iter().all(|&v| (0.0..cell).contains(&v)));
        BiosensorTruth::two_peaks().attach(&mut p).unwrap();
        let y = p.y_exact().unwrap();
        let nt = cfg.time_grid.len();
        for i in 0..y.len() {
            let t = cfg.time_grid[i % nt];
            if t > 0.0 && t <= cfg.t_inj {
                assert!(y[i] > 0.0);
            }
        }
    }
}
