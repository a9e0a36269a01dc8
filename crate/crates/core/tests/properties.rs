//! Property checks on invariants that hold for arbitrary inputs.

use std::sync::OnceLock;

use nalgebra::DVector;
use proptest::prelude::*;

use sar_core::config::{ExperimentConfig, SourceConfig};
use sar_core::ensemble::{quantile_sorted, MomentAccumulator};
use sar_core::integrators::{NoiseSchedule, SarSystem, Scheme};
use sar_core::noise::{absolute_delta, inject_data_noise, make_qwiener, sample_increment, QFamily, QWienerSpec, RngLineage};
use sar_core::problems::{biosensor_kernel, make_toy_problem, BiosensorConfig};
use sar_core::spectral::{ForwardProblem, SourceDraw, SourceFamily};
use sar_core::stopping::{discrepancy_chi1, StopOptions, StoppingRule};

fn toy() -> &'static ForwardProblem {
    static P: OnceLock<ForwardProblem> = OnceLock::new();
    P.get_or_init(|| make_toy_problem(60).unwrap())
}

fn vector(n: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-10.0..10.0f64, n).prop_map(DVector::from_vec)
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_is_bounded_by_the_operator_norm(x in vector(60)) {
        let p = toy();
        let ax = p.apply_forward(&x).unwrap();
        prop_assert!(p.norm_range(&ax) <= p.norm() * p.norm_domain(&x) * (1.0 + 1e-10) + 1e-14);
    }

    #[test]
    fn spectral_tail_is_monotone(x0 in vector(60), a in 0.0..0.02f64, b in 0.0..0.02f64) {
        let p = toy();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(p.spectral_tail(&x0, lo).unwrap() <= p.spectral_tail(&x0, hi).unwrap());
    }

    #[test]
    fn source_coefficients_round_trip(v in vector(60), exponent in 0.0..1.5f64) {
        let mut p = toy().clone();
        let family = SourceFamily::Holder { p: exponent };
        let x0 = DVector::zeros(p.domain_dim());
        p.apply_source(family, &x0, &v).unwrap();
        let c = p.spectral_coefficients(&(&x0 - p.x_true().unwrap())).unwrap();
        for (j, s) in p.singular_values().iter().enumerate() {
            let expected = family.phi(s * s) * v[j];
            prop_assert!((c[j] - expected).abs() <= 1e-9 * (1.0 + v.amax()));
        }
    }

    #[test]
    fn data_noise_has_exact_norm(rel in 1e-6..0.5f64, seed in any::<u64>(), realization in 0u64..1000) {
        let p = toy();
        let delta = absolute_delta(p, rel).unwrap();
        let y = inject_data_noise(p, delta, RngLineage::data_noise(seed, realization)).unwrap();
        let gap = p.norm_range(&(y - p.y_exact().unwrap()));
        prop_assert!((gap - delta).abs() <= 1e-12 * delta.max(1e-300) + 1e-300);
    }

    #[test]
    fn merged_moments_match_sequential(
        samples in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 2..60),
        split in 0usize..60,
    ) {
        let split = split.min(samples.len());
        let mut whole = MomentAccumulator::new(3);
        let (mut left, mut right) = (MomentAccumulator::new(3), MomentAccumulator::new(3));
        for (k, s) in samples.iter().enumerate() {
            whole.push(s);
            if k < split { left.push(s) } else { right.push(s) }
        }
        left.merge(&right);
        prop_assert_eq!(left.count(), whole.count());
        for k in 2..=4 {
            let (a, b) = (left.central_moment(k).unwrap(), whole.central_moment(k).unwrap());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()), "order {}: {} vs {}", k, x, y);
            }
        }
        for (x, y) in left.mean().iter().zip(whole.mean()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn raw_second_moment_is_mean_square_plus_variance(
        samples in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 2), 1..40),
    ) {
        let mut acc = MomentAccumulator::new(2);
        for s in &samples {
            acc.push(s);
        }
        let n = samples.len() as f64;
        let pop = acc.central_moment(2).unwrap();
        let raw = acc.raw_second_moment();
        for i in 0..2 {
            let direct = samples.iter().map(|s| s[i] * s[i]).sum::<f64>() / n;
            prop_assert!((raw[i] - (acc.mean()[i].powi(2) + pop[i])).abs() <= 1e-12 * (1.0 + raw[i]));
            prop_assert!((raw[i] - direct).abs() <= 1e-10 * (1.0 + direct));
        }
    }

    #[test]
    fn quantile_bands_nest(mut data in prop::collection::vec(-100.0..100.0f64, 2..200), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        data.sort_by(f64::total_cmp);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (inner_lo, inner_hi) = (quantile_sorted(&data, (1.0 - lo) / 2.0), quantile_sorted(&data, (1.0 + lo) / 2.0));
        let (outer_lo, outer_hi) = (quantile_sorted(&data, (1.0 - hi) / 2.0), quantile_sorted(&data, (1.0 + hi) / 2.0));
        prop_assert!(outer_lo <= inner_lo && inner_lo <= inner_hi && inner_hi <= outer_hi);
        prop_assert!(data[0] <= outer_lo && outer_hi <= data[data.len() - 1]);
    }

    #[test]
    fn config_round_trips_through_toml(
        delta in 1e-6..0.5f64,
        tau in 1.0..3.0f64,
        n_paths in 1usize..10_000,
        seed in any::<u64>(),
        holder in 0.01..2.0f64,
        chi2 in any::<bool>(),
    ) {
        let cfg = ExperimentConfig {
            delta,
            tau,
            n_paths,
            master_seed: seed,
            rule: if chi2 { StoppingRule::DiscrepancyChi2 } else { StoppingRule::DiscrepancyChi1 },
            schedule: NoiseSchedule::HolderDecay { p: holder, c: 1.0 },
            source: Some(SourceConfig { family: SourceFamily::Holder { p: holder }, rho: 1.0, draw: SourceDraw::Sharp }),
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn biosensor_kernel_is_a_bound_fraction(
        t in 0.0..6000.0f64,
        c_index in 0usize..9,
        log_ka in 3.0..7.0f64,
        log_kd in -4.0..0.0f64,
    ) {
        let cfg = BiosensorConfig::default();
        let k = biosensor_kernel(t, cfg.concentrations[c_index], 10f64.powf(log_ka), 10f64.powf(log_kd), &cfg);
        prop_assert!((0.0..=1.0).contains(&k), "kernel {}", k);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn increments_are_uncorrelated(seed in any::<u64>(), path in 0u64..1_000_000) {
        let spec = QWienerSpec { q: vec![1.0, 0.25], trace_weighted: 1.0 };
        let n = 20_000;
        let a = RngLineage::new(seed, path);
        let b = RngLineage::new(seed, path + 1);
        let draw = |l: RngLineage, k: u64| sample_increment(&spec, l.at_step(k), 0.01).unwrap();
        let now: Vec<DVector<f64>> = (0..=n).map(|k| draw(a, k)).collect();
        let other: Vec<DVector<f64>> = (0..n).map(|k| draw(b, k)).collect();
        for j in 0..2 {
            let x: Vec<f64> = now[..n as usize].iter().map(|d| d[j]).collect();
            let lag: Vec<f64> = now[1..].iter().map(|d| d[j]).collect();
            let y: Vec<f64> = other.iter().map(|d| d[j]).collect();
            prop_assert!(correlation(&x, &lag).abs() <= 0.03);
            prop_assert!(correlation(&x, &y).abs() <= 0.03);
        }
        let x: Vec<f64> = now.iter().map(|d| d[0]).collect();
        let z: Vec<f64> = now.iter().map(|d| d[1]).collect();
        prop_assert!(correlation(&x, &z).abs() <= 0.03);
    }

    #[test]
    fn discrepancy_time_does_not_depend_on_the_bracket_growth(
        rel in 1e-4..0.05f64,
        seed in 0u64..1000,
        expansion in 1.5..8.0f64,
    ) {
        let p = toy();
        let spec = make_qwiener(p, &QFamily::default()).unwrap();
        let delta = absolute_delta(p, rel).unwrap();
        let y = inject_data_noise(p, delta, RngLineage::data_noise(seed, 0)).unwrap();
        let x0 = DVector::zeros(p.domain_dim());
        let sys = SarSystem::new(p, &spec, NoiseSchedule::default(), &y, &x0).unwrap();
        let base = discrepancy_chi1(&sys, delta, &StopOptions::default()).unwrap();
        let other = discrepancy_chi1(&sys, delta, &StopOptions { expansion, ..StopOptions::default() }).unwrap();
        prop_assert!((base.t_star - other.t_star).abs() <= 1e-6 * base.t_star, "{} vs {}", base.t_star, other.t_star);
    }

    #[test]
    fn paths_do_not_depend_on_call_order(seed in any::<u64>(), path in 0u64..1000) {
        let p = toy();
        let spec = make_qwiener(p, &QFamily::default()).unwrap();
        let y = p.y_exact().unwrap().clone();
        let x0 = DVector::zeros(p.domain_dim());
        let sys = SarSystem::new(p, &spec, NoiseSchedule::default(), &y, &x0).unwrap();
        let lineage = RngLineage::new(seed, path);
        let first = sys.run_path(Scheme::ExpEuler, 0.1, 2.0, lineage).unwrap();
        let _ = sys.run_path(Scheme::ExpEuler, 0.1, 2.0, RngLineage::new(seed, path + 1)).unwrap();
        let again = sys.run_path(Scheme::ExpEuler, 0.1, 2.0, lineage).unwrap();
        prop_assert_eq!(first.coeffs, again.coeffs);
    }
}
