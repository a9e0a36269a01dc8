//! C interface to `sar-core`.
//!
//! Experiments are opaque handles created from TOML text or one of the
//! built-in problems and released with `sar_experiment_free`. Every fallible
//! call returns a `SarStatus`; the message of the most recent failure on the
//! calling thread is available through `sar_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sar_core::config::{ExperimentConfig, ProblemConfig};
use sar_core::experiments::{solve_on, stopping_time};
use sar_core::integrators::SarSystem;
use sar_core::spectral::ForwardProblem;
use sar_core::SarError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SarStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Numerical = 3,
    Stopping = 4,
    Domain = 5,
    Dimension = 6,
    Unsupported = 7,
    Parse = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&SarError> for SarStatus {
    fn from(e: &SarError) -> Self {
        match e {
            SarError::Domain(_) => SarStatus::Domain,
            SarError::Config(_) => SarStatus::Config,
            SarError::Dimension { .. } => SarStatus::Dimension,
            SarError::Unsupported(_) => SarStatus::Unsupported,
            SarError::Numerical(_) => SarStatus::Numerical,
            SarError::NotConverged { .. } | SarError::SweepStop { .. } => SarStatus::Stopping,
            SarError::Parse(_) => SarStatus::Parse,
            SarError::Io(_) => SarStatus::Io,
        }
    }
}

/// Problem, data and configuration of one experiment.
pub struct SarExperiment {
    config: ExperimentConfig,
    problem: ForwardProblem,
}

/// Scalar results of `sar_solve`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SarSolveSummary {
    /// Absolute noise level.
    pub delta: f64,
    /// End time of the ensemble (the stopping time unless fixed in the config).
    pub t_end: f64,
    /// Mean squared error, NaN without an exact solution.
    pub mse: f64,
    pub variance_trace: f64,
    /// Relative data residual of the ensemble mean.
    pub relative_residual: f64,
    pub n_paths: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), (SarStatus, String)>) -> SarStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SarStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SarStatus::Panic
        }
    }
}

fn lift<T>(r: sar_core::Result<T>) -> Result<T, (SarStatus, String)> {
    r.map_err(|e| (SarStatus::from(&e), e.to_string()))
}

fn null(what: &str) -> (SarStatus, String) {
    (SarStatus::NullPointer, format!("{what} is null"))
}

unsafe fn experiment<'a>(h: *const SarExperiment) -> Result<&'a SarExperiment, (SarStatus, String)> {
    h.as_ref().ok_or_else(|| null("experiment handle"))
}

unsafe fn out_slice<'a>(buf: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], (SarStatus, String)> {
    if buf.is_null() {
        return Err(null("output buffer"));
    }
    if len < need {
        return Err((SarStatus::BufferTooSmall, format!("buffer holds {len} values, need {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(buf, need))
}

fn create(config: ExperimentConfig, out: *mut *mut SarExperiment) -> Result<(), (SarStatus, String)> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    lift(config.validate())?;
    let problem = lift(config.build_problem())?;
    let handle = Box::into_raw(Box::new(SarExperiment { config, problem }));
    // SAFETY: checked non-null above; the caller owns the handle from here on.
    unsafe { *out = handle };
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sar_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates an experiment from TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sar_experiment_from_toml(toml: *const c_char, out: *mut *mut SarExperiment) -> SarStatus {
    guard(|| {
        if toml.is_null() {
            return Err(null("toml"));
        }
        let text = CStr::from_ptr(toml)
            .to_str()
            .map_err(|e| (SarStatus::Parse, format!("toml is not UTF-8: {e}")))?;
        create(lift(ExperimentConfig::from_toml_str(text))?, out)
    })
}

/// Creates the Green's-function toy problem with `n` nodes, relative noise
/// level `delta` and default settings otherwise.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sar_experiment_toy(n: usize, delta: f64, seed: u64, out: *mut *mut SarExperiment) -> SarStatus {
    guard(|| {
        let config =
            ExperimentConfig { problem: ProblemConfig::Toy { n }, delta, master_seed: seed, ..ExperimentConfig::default() };
        create(config, out)
    })
}

/// Creates the synthetic two-peak biosensor experiment.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sar_experiment_biosensor(delta: f64, seed: u64, out: *mut *mut SarExperiment) -> SarStatus {
    guard(|| {
        let config = ExperimentConfig { delta, master_seed: seed, ..ExperimentConfig::biosensor_default() };
        create(config, out)
    })
}

/// # Safety
/// `handle` must be null or come from a constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sar_experiment_free(handle: *mut SarExperiment) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Sets the ensemble size.
///
/// # Safety
/// `handle` must be a live experiment.
#[no_mangle]
pub unsafe extern "C" fn sar_experiment_set_paths(handle: *mut SarExperiment, n_paths: usize) -> SarStatus {
    guard(|| {
        let exp = handle.as_mut().ok_or_else(|| null("experiment handle"))?;
        let config = ExperimentConfig { n_paths, ..exp.config.clone() };
        lift(config.validate())?;
        exp.config = config;
        Ok(())
    })
}

/// Writes the domain dimension, range dimension and numerical rank.
///
/// # Safety
/// `handle` must be a live experiment; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sar_experiment_dims(
    handle: *const SarExperiment,
    domain: *mut usize,
    range: *mut usize,
    rank: *mut usize,
) -> SarStatus {
    guard(|| {
        let exp = experiment(handle)?;
        if domain.is_null() || range.is_null() || rank.is_null() {
            return Err(null("output pointer"));
        }
        *domain = exp.problem.domain_dim();
        *range = exp.problem.range_dim();
        *rank = exp.problem.rank();
        Ok(())
    })
}

/// Writes the `rank` singular values in descending order.
///
/// # Safety
/// `handle` must be a live experiment; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sar_singular_values(handle: *const SarExperiment, buf: *mut f64, len: usize) -> SarStatus {
    guard(|| {
        let exp = experiment(handle)?;
        let s = exp.problem.singular_values();
        out_slice(buf, len, s.len())?.copy_from_slice(s.as_slice());
        Ok(())
    })
}

fn system(exp: &SarExperiment) -> sar_core::Result<(f64, SarSystem)> {
    let spec = exp.config.build_spec(&exp.problem)?;
    let (delta, y) = exp.config.build_data(&exp.problem)?;
    let sys = SarSystem::new(&exp.problem, &spec, exp.config.schedule, &y, &exp.config.x0(&exp.problem))?;
    Ok((delta, sys))
}

/// Stopping time of the configured rule on the experiment's noisy data.
///
/// # Safety
/// `handle` must be a live experiment; `t_star` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sar_stopping_time(handle: *const SarExperiment, t_star: *mut f64) -> SarStatus {
    guard(|| {
        let exp = experiment(handle)?;
        if t_star.is_null() {
            return Err(null("t_star"));
        }
        let (delta, sys) = lift(system(exp))?;
        *t_star = lift(stopping_time(&exp.config, &exp.problem, &sys, delta))?.t_star;
        Ok(())
    })
}

/// Closed-form mean `E x(t)` on the domain grid.
///
/// # Safety
/// `handle` must be a live experiment; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sar_mean_at(handle: *const SarExperiment, t: f64, buf: *mut f64, len: usize) -> SarStatus {
    guard(|| {
        let exp = experiment(handle)?;
        if !(t.is_finite() && t >= 0.0) {
            return Err((SarStatus::Config, format!("time must be non-negative, got {t}")));
        }
        let (_, sys) = lift(system(exp))?;
        let mean = lift(sys.to_grid(&exp.problem, &sys.mean_coeffs(t)))?;
        out_slice(buf, len, mean.len())?.copy_from_slice(mean.as_slice());
        Ok(())
    })
}

/// Runs the stopped ensemble. Writes the scalar summary and, when the
/// buffers are non-null, the pointwise ensemble mean and variance.
///
/// # Safety
/// `handle` must be a live experiment; `summary` must be writable; `mean`
/// and `variance` must be null or hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sar_solve(
    handle: *const SarExperiment,
    summary: *mut SarSolveSummary,
    mean: *mut f64,
    variance: *mut f64,
    len: usize,
) -> SarStatus {
    guard(|| {
        let exp = experiment(handle)?;
        if summary.is_null() {
            return Err(null("summary"));
        }
        let n = exp.problem.domain_dim();
        let config = ExperimentConfig { levels: Vec::new(), ..exp.config.clone() };
        let report = lift(solve_on(&config, &exp.problem))?;
        if !mean.is_null() {
            out_slice(mean, len, n)?.copy_from_slice(report.stats.mean.as_slice());
        }
        if !variance.is_null() {
            out_slice(variance, len, n)?.copy_from_slice(report.stats.variance.as_slice());
        }
        *summary = SarSolveSummary {
            delta: report.delta,
            t_end: report.t_end,
            mse: report.stats.mse.map_or(f64::NAN, |m| m.value),
            variance_trace: report.stats.variance_trace(),
            relative_residual: report.relative_residual,
            n_paths: report.stats.n_paths,
        };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn last_error() -> String {
        let mut buf = vec![0 as c_char; 256];
        let n = unsafe { sar_last_error(buf.as_mut_ptr(), buf.len()) };
        let msg = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
        assert_eq!(n, msg.len());
        msg
    }

    #[test]
    fn toy_round_trip() {
        let mut h = ptr::null_mut();
        assert_eq!(unsafe { sar_experiment_toy(40, 0.01, 7, &mut h) }, SarStatus::Ok);
        let (mut d, mut r, mut k) = (0, 0, 0);
        assert_eq!(unsafe { sar_experiment_dims(h, &mut d, &mut r, &mut k) }, SarStatus::Ok);
        assert_eq!((d, r, k), (40, 40, 40));
        let mut s = vec![0.0; k];
        assert_eq!(unsafe { sar_singular_values(h, s.as_mut_ptr(), s.len()) }, SarStatus::Ok);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        let mut t = 0.0;
        assert_eq!(unsafe { sar_stopping_time(h, &mut t) }, SarStatus::Ok);
        assert!(t > 0.0);
        assert_eq!(unsafe { sar_experiment_set_paths(h, 64) }, SarStatus::Ok);
        let mut summary = SarSolveSummary::default();
        let (mut mean, mut var) = (vec![0.0; d], vec![0.0; d]);
        let status = unsafe { sar_solve(h, &mut summary, mean.as_mut_ptr(), var.as_mut_ptr(), d) };
        assert_eq!(status, SarStatus::Ok);
        assert_eq!(summary.n_paths, 64);
        assert_eq!(summary.t_end, t);
        assert!(summary.mse.is_finite() && var.iter().all(|v| *v >= 0.0));
        let mut analytic = vec![0.0; d];
        assert_eq!(unsafe { sar_mean_at(h, t, analytic.as_mut_ptr(), d) }, SarStatus::Ok);
        let gap: f64 = mean.iter().zip(&analytic).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 0.1);
        unsafe { sar_experiment_free(h) };
    }

    #[test]
    fn errors_are_reported() {
        let mut h = ptr::null_mut();
        assert_eq!(unsafe { sar_experiment_toy(3, 0.01, 0, &mut h) }, SarStatus::Config);
        assert!(h.is_null());
        assert!(last_error().contains("n ≥ 10"));

        let bad = CString::new("tau = 0.5").unwrap();
        assert_eq!(unsafe { sar_experiment_from_toml(bad.as_ptr(), &mut h) }, SarStatus::Config);
        let junk = CString::new("tau = [").unwrap();
        assert_eq!(unsafe { sar_experiment_from_toml(junk.as_ptr(), &mut h) }, SarStatus::Parse);

        let good = CString::new("[problem]\nkind = \"toy\"\nn = 20\n").unwrap();
        assert_eq!(unsafe { sar_experiment_from_toml(good.as_ptr(), &mut h) }, SarStatus::Ok);
        let mut small = [0.0; 3];
        assert_eq!(unsafe { sar_singular_values(h, small.as_mut_ptr(), 3) }, SarStatus::BufferTooSmall);
        assert_eq!(unsafe { sar_mean_at(h, -1.0, small.as_mut_ptr(), 3) }, SarStatus::Config);
        assert_eq!(unsafe { sar_singular_values(ptr::null(), small.as_mut_ptr(), 3) }, SarStatus::NullPointer);
        unsafe { sar_experiment_free(h) };
        unsafe { sar_experiment_free(ptr::null_mut()) };
    }

    #[test]
    fn stopping_failure_maps_to_status() {
        let cfg = CString::new("t_max = 1.0\n").unwrap();
        let mut h = ptr::null_mut();
        assert_eq!(unsafe { sar_experiment_from_toml(cfg.as_ptr(), &mut h) }, SarStatus::Ok);
        let mut t = 0.0;
        assert_eq!(unsafe { sar_stopping_time(h, &mut t) }, SarStatus::Stopping);
        assert!(last_error().contains("did not converge"));
        unsafe { sar_experiment_free(h) };
    }
}
