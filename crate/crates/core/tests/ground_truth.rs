//! Benchmark surfaces, estimands and replication bookkeeping.

use ace_core::simulation::{
    aggregate, franke_mu, run_replication, true_propensity, GroundTruth, Method, Scenario, ScenarioConfig,
};
use ace_core::surrogate::{Arm, WeightSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tensor Gauss-Legendre values of the population estimands on the unit square.
const POPULATION_ATE: f64 = 0.06251840930098;
const POPULATION_ATTE: f64 = 0.06004074631260;
const POPULATION_ATO: f64 = 0.06225629127263;

fn ite(x: f64, y: f64) -> f64 {
    let (u, v) = (9.0 * x, 9.0 * y);
    0.5 * (-0.25 * (u - 7.0).powi(2) - 0.25 * (v - 3.0).powi(2)).exp() - 0.2 * (-(u - 4.0).powi(2) - (v - 7.0).powi(2)).exp()
}

fn propensity(x: f64, y: f64) -> f64 {
    1.0 / (1.0 + (2.0 - 2.0 * x * y).exp())
}

/// Midpoint rule on an `m × m` grid of `w(e) · ite` and `w(e)`.
fn midpoint_ratio(m: usize, w: impl Fn(f64) -> f64) -> f64 {
    let h = 1.0 / m as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..m {
        for j in 0..m {
            let (x, y) = ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
            let wt = w(propensity(x, y));
            num += wt * ite(x, y);
            den += wt;
        }
    }
    num / den
}

#[test]
fn frozen_estimands_agree_with_midpoint_rule() {
    assert!((midpoint_ratio(1500, |_| 1.0) - POPULATION_ATE).abs() < 1e-6);
    assert!((midpoint_ratio(1500, |e| e) - POPULATION_ATTE).abs() < 1e-6);
    assert!((midpoint_ratio(1500, |e| e * (1.0 - e)) - POPULATION_ATO).abs() < 1e-6);
}

#[test]
fn surfaces_match_closed_forms() {
    assert!((franke_mu(&[0.0, 0.0], Arm::Control).unwrap() - 0.7664203391110919).abs() < 1e-15);
    assert!((true_propensity(&[0.0, 0.0]).unwrap() - 0.11920292202211755).abs() < 1e-15);
    for &(x, y) in &[(0.1, 0.9), (0.5, 0.5), (7.0 / 9.0, 1.0 / 3.0), (0.95, 0.2)] {
        let gt = GroundTruth::default();
        assert!((gt.ite(&[x, y]).unwrap() - ite(x, y)).abs() < 1e-14);
        assert!((gt.propensity(&[x, y]).unwrap() - propensity(x, y)).abs() < 1e-12);
    }
}

#[test]
fn monte_carlo_truth_covers_population_values() {
    let gt = GroundTruth::default();
    for (spec, value) in [
        (WeightSpec::Ate, POPULATION_ATE),
        (WeightSpec::Atte, POPULATION_ATTE),
        (WeightSpec::Ato, POPULATION_ATO),
    ] {
        let mc = gt.monte_carlo_truth(spec, 400_000, 9).unwrap();
        assert!((mc.estimate - value).abs() < 4.0 * mc.std_error, "{spec:?}: {} ± {}", mc.estimate, mc.std_error);
    }
}

#[test]
fn outcome_noise_has_configured_spread() {
    let gt = GroundTruth::new(0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = [0.3, 0.6];
    let n = 40_000;
    let ys: Vec<f64> = (0..n).map(|_| gt.sample_outcome(&x, Arm::Treatment, &mut rng).unwrap()).collect();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!((sd - 0.05).abs() < 0.02 * 0.05, "sd {sd}");
    assert!((mean - gt.mu(&x, Arm::Treatment).unwrap()).abs() < 4.0 * 0.05 / (n as f64).sqrt());
}

#[test]
fn realized_treatment_rate_follows_propensity() {
    let m = 400;
    let h = 1.0 / m as f64;
    let mean_e = (0..m * m)
        .map(|k| propensity(((k / m) as f64 + 0.5) * h, ((k % m) as f64 + 0.5) * h))
        .sum::<f64>()
        / (m * m) as f64;
    let cfg = ScenarioConfig {
        scenario: Scenario::S3,
        method: Method::Random,
        n: 200,
        n_pool: 400,
        n_init: 2,
        restarts: 1,
        refit_restarts: 1,
        refit_interval: 50,
        ..Default::default()
    };
    let mut treated = 0usize;
    let mut total = 0usize;
    for seed in 0..15 {
        let r = run_replication(&cfg, seed).unwrap();
        treated += r.arms.iter().filter(|a| **a == Arm::Treatment).count();
        total += r.arms.len();
    }
    let rate = treated as f64 / total as f64;
    let sd = (mean_e * (1.0 - mean_e) / total as f64).sqrt();
    assert!((rate - mean_e).abs() < 4.0 * sd, "rate {rate} vs {mean_e}");
}

#[test]
fn replications_are_reproducible_and_share_draws_across_methods() {
    let cfg = ScenarioConfig {
        scenario: Scenario::S2A,
        method: Method::Random,
        n: 20,
        n_pool: 60,
        n_test: 50,
        n_init: 3,
        restarts: 2,
        refit_restarts: 1,
        refit_interval: 5,
        ..Default::default()
    };
    let a = run_replication(&cfg, 4).unwrap();
    let b = run_replication(&cfg, 4).unwrap();
    assert_eq!(a.selected, b.selected);
    assert_eq!(a.estimate, b.estimate);
    let ace = run_replication(&ScenarioConfig { method: Method::Ace, ..cfg.clone() }, 4).unwrap();
    assert_eq!(a.truth, ace.truth);
    assert_eq!(a.selected[..6], ace.selected[..6]);
    let m = aggregate(&[a.clone(), b]);
    assert_eq!(m.replications, 2);
    assert!((m.rmse_e3().unwrap() - 1e3 * a.error().unwrap().abs()).abs() < 1e-9);
}
