//! Acquisition scores against fantasized refits and exhaustive scans.

use ace_core::acquisition::{
    select_alc_e, select_alc_pool, select_greedy, select_random, select_scenario1, select_scenario2a,
    select_scenario2b, select_scenario3, select_ucb_with, sigma_te, ucb_score, variance_reduction,
    expected_variance_reduction, Pool, ReductionOptions, ReductionScorer, UcbConfig,
};
use ace_core::kernel_gp::{GpHyperParams, KernelSpec};
use ace_core::propensity::PropensityModel;
use ace_core::surrogate::{weights, Arm, Observation, TestSet, TwoArmModel, WeightSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn se(a: &[f64], b: &[f64], tau2: f64, ls: &[f64]) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(ls).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
    tau2 * (-0.5 * r2).exp()
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// `wᵀ Σ w` over `test` after conditioning on `x` with per-point noise `diag`.
///
/// Only the data-dependent term is returned; the prior term cancels in differences.
fn explained(x: &[Vec<f64>], diag: &[f64], test: &[Vec<f64>], w: &[f64], tau2: f64, ls: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| se(&x[i], &x[j], tau2, ls) + if i == j { diag[i] } else { 0.0 });
    let kinv = k.try_inverse().expect("invertible");
    let g = DVector::from_fn(n, |i, _| test.iter().zip(w).map(|(t, wk)| wk * se(&x[i], t, tau2, ls)).sum());
    g.dot(&(kinv * &g))
}

struct Snapshot {
    model: TwoArmModel,
    test: TestSet,
    w: DVector<f64>,
    pool: Pool,
    e_pool: DVector<f64>,
}

fn random_params(rng: &mut ChaCha8Rng) -> GpHyperParams {
    let tau2 = 10f64.powf(rng.random_range(-1.0..0.5));
    let ls = vec![rng.random_range(0.1..0.5), rng.random_range(0.1..0.5)];
    let eta2 = 10f64.powf(rng.random_range(-4.0..-1.0));
    GpHyperParams::new(KernelSpec::squared_exponential(tau2, ls).unwrap(), eta2, rng.random_range(-0.5..0.5)).unwrap()
}

fn snapshot(rng: &mut ChaCha8Rng, n_pool: usize) -> Snapshot {
    let n_obs = rng.random_range(2..=14);
    let mut obs = Vec::new();
    for i in 0..n_obs {
        let arm = if i < 2 { Arm::from_bool(i == 1) } else { Arm::from_bool(rng.random_bool(0.5)) };
        obs.push(Observation::new(vec![rng.random(), rng.random()], arm, rng.random_range(-1.0..1.0)));
    }
    let model = TwoArmModel::with_params(2, &obs, [random_params(rng), random_params(rng)]).unwrap();
    let test = TestSet::new(DMatrix::from_fn(25, 2, |_, _| rng.random::<f64>())).unwrap();
    let w = DVector::from_fn(25, |_, _| rng.random_range(0.05..1.0));
    let pool = Pool::new(DMatrix::from_fn(n_pool, 2, |_, _| rng.random::<f64>()));
    let e_pool = DVector::from_fn(n_pool, |_, _| rng.random_range(0.05..0.95));
    Snapshot { model, test, w, pool, e_pool }
}

/// `wᵀΣ_n w − wᵀΣ_{n+1} w` by refitting with the candidate appended.
fn fantasized_reduction(s: &Snapshot, arm: Arm, x: &[f64], new_noise: f64) -> f64 {
    let gp = s.model.gp(arm);
    let k = &gp.params().kernel;
    let base_diag = gp.params().noise_variance + gp.jitter();
    let xs: Vec<Vec<f64>> = (0..gp.len()).map(|i| row(gp.data().inputs(), i)).collect();
    let test: Vec<Vec<f64>> = (0..s.test.len()).map(|i| s.test.row(i)).collect();
    let diag = vec![base_diag; xs.len()];
    let before = explained(&xs, &diag, &test, s.w.as_slice(), k.signal_variance, &k.lengthscales);
    let mut xa = xs.clone();
    xa.push(x.to_vec());
    let mut da = diag.clone();
    da.push(new_noise);
    let after = explained(&xa, &da, &test, s.w.as_slice(), k.signal_variance, &k.lengthscales);
    after - before
}

#[test]
fn reduction_equals_fantasized_noiseless_refit() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let s = snapshot(&mut rng, 1);
        let x = [rng.random::<f64>(), rng.random::<f64>()];
        for arm in Arm::BOTH {
            let got = variance_reduction(&s.model, arm, &x, &s.test, &s.w).unwrap();
            let want = fantasized_reduction(&s, arm, &x, 0.0);
            assert!((got - want).abs() <= 1e-6 * want.abs(), "{got} vs {want}");
        }
    }
}

#[test]
fn noise_adjusted_reduction_equals_fantasized_noisy_refit() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let s = snapshot(&mut rng, 1);
        let x = [rng.random::<f64>(), rng.random::<f64>()];
        let scorer = ReductionScorer::new(&s.model, &s.test, &s.w, ReductionOptions { noise_adjusted: true }).unwrap();
        for arm in Arm::BOTH {
            let got = scorer.score(arm, &x).unwrap().value;
            let want = fantasized_reduction(&s, arm, &x, s.model.params(arm).noise_variance);
            assert!((got - want).abs() <= 1e-6 * want.abs(), "{got} vs {want}");
        }
    }
}

#[test]
fn pool_selections_match_exhaustive_scans() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let prop = PropensityModel::benchmark();
    for _ in 0..40 {
        let mut s = snapshot(&mut rng, 20);
        for _ in 0..3 {
            let i = rng.random_range(0..20);
            if s.pool.is_available(i) {
                s.pool.take(i).unwrap();
            }
        }
        let avail = s.pool.available_indices();
        let x = |i: usize| s.pool.row(i);

        let mut best = (f64::NEG_INFINITY, 0, Arm::Control);
        for &i in &avail {
            for arm in Arm::BOTH {
                let r = variance_reduction(&s.model, arm, &x(i), &s.test, &s.w).unwrap();
                if r > best.0 {
                    best = (r, i, arm);
                }
            }
        }
        let p = select_scenario2a(&s.model, &s.pool, &s.test, &s.w).unwrap();
        assert_eq!((p.index, p.arm), (best.1, Some(best.2)));
        assert_eq!(p.evaluations, 2 * avail.len());

        let e_test = prop.evaluate_rows(s.test.points()).unwrap();
        let w_hat = weights(WeightSpec::Atte, &e_test).unwrap();
        let argmax = |f: &dyn Fn(usize) -> f64| {
            avail.iter().copied().fold((f64::NEG_INFINITY, usize::MAX), |b, i| {
                let v = f(i);
                if v > b.0 { (v, i) } else { b }
            })
        };
        let evr = argmax(&|i| {
            let e = prop.evaluate(&x(i)).unwrap();
            expected_variance_reduction(&s.model, &x(i), e, &s.test, &w_hat).unwrap()
        });
        let p = select_scenario2b(&s.model, &s.pool, &prop, WeightSpec::Atte, &s.test).unwrap();
        assert_eq!(p.index, evr.1);

        let alc = avail.iter().copied().flat_map(|i| Arm::BOTH.map(|a| (i, a))).fold(
            (f64::NEG_INFINITY, 0, Arm::Control),
            |b, (i, a)| {
                let v = s.model.predict(a, &x(i)).unwrap().1;
                if v > b.0 { (v, i, a) } else { b }
            },
        );
        let p = select_alc_pool(&s.model, &s.pool).unwrap();
        assert_eq!((p.index, p.arm), (alc.1, Some(alc.2)));

        let alc_e = argmax(&|i| {
            let e = prop.evaluate(&x(i)).unwrap();
            e * s.model.predict(Arm::Treatment, &x(i)).unwrap().1 + (1.0 - e) * s.model.predict(Arm::Control, &x(i)).unwrap().1
        });
        assert_eq!(select_alc_e(&s.model, &s.pool, &prop).unwrap().index, alc_e.1);

        let mut ucb = UcbConfig::new(0.5).unwrap();
        ucb.t = 3;
        let beta = 0.25 * 3f64.ln();
        let u = argmax(&|i| ucb_score(&s.model, &x(i), prop.evaluate(&x(i)).unwrap(), beta).unwrap());
        assert_eq!(select_scenario3(&s.model, &s.pool, &prop, &mut ucb).unwrap().index, u.1);
        assert_eq!(ucb.t, 4);
    }
}

#[test]
fn scenario1_arm_follows_larger_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..50 {
        let s = snapshot(&mut rng, 1);
        let x = [rng.random::<f64>(), rng.random::<f64>()];
        let r0 = variance_reduction(&s.model, Arm::Control, &x, &s.test, &s.w).unwrap();
        let r1 = variance_reduction(&s.model, Arm::Treatment, &x, &s.test, &s.w).unwrap();
        let arm = select_scenario1(&s.model, &x, &s.test, &s.w).unwrap();
        assert_eq!(arm, if r1 > r0 { Arm::Treatment } else { Arm::Control });
    }
}

#[test]
fn sigma_te_matches_sampled_construction() {
    use rand_distr::{Bernoulli, Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..5 {
        let s = snapshot(&mut rng, 1);
        let x = [rng.random::<f64>(), rng.random::<f64>()];
        let e = rng.random_range(0.1..0.9);
        let (m1, v1) = s.model.predict(Arm::Treatment, &x).unwrap();
        let (m0, v0) = s.model.predict(Arm::Control, &x).unwrap();
        let f1 = Normal::new(m1, v1.sqrt()).unwrap();
        let f0 = Normal::new(m0, v0.sqrt()).unwrap();
        let a = Bernoulli::new(e).unwrap();
        let n = 200_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| if a.sample(&mut rng) { f1.sample(&mut rng) - f0.sample(&mut rng) } else { 0.0 })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let got = sigma_te(&s.model, &x, e).unwrap();
        assert!((got - sd).abs() < 0.02 * sd, "{got} vs {sd}");
    }
}

#[test]
fn random_selection_is_uniform_over_available_units() {
    let mut pool = Pool::new(DMatrix::from_fn(10, 2, |i, _| i as f64 / 10.0));
    pool.take(2).unwrap();
    pool.take(7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let draws = 80_000;
    let mut counts = [0usize; 10];
    for _ in 0..draws {
        counts[select_random(&pool, &mut rng).unwrap()] += 1;
    }
    assert_eq!((counts[2], counts[7]), (0, 0));
    let p = 1.0 / 8.0;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, c) in counts.iter().enumerate() {
        if i != 2 && i != 7 {
            assert!((*c as f64 - draws as f64 * p).abs() < 3.0 * sd, "unit {i}: {c}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reduction_is_nonnegative_and_quadratic_in_weights(seed in any::<u64>(), lambda in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = snapshot(&mut rng, 1);
        let x = [rng.random::<f64>(), rng.random::<f64>()];
        let lw = &s.w * lambda;
        for arm in Arm::BOTH {
            let r = variance_reduction(&s.model, arm, &x, &s.test, &s.w).unwrap();
            let rl = variance_reduction(&s.model, arm, &x, &s.test, &lw).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert!((rl - lambda * lambda * r).abs() <= 1e-9 * rl.abs().max(1e-300));
        }
    }

    #[test]
    fn selections_ignore_weight_scale(seed in any::<u64>(), lambda in prop::sample::select(vec![1e-3, 1.0, 1e3])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = snapshot(&mut rng, 20);
        let lw = &s.w * lambda;
        let a = select_scenario2a(&s.model, &s.pool, &s.test, &s.w).unwrap();
        let b = select_scenario2a(&s.model, &s.pool, &s.test, &lw).unwrap();
        prop_assert_eq!((a.index, a.arm), (b.index, b.arm));
        let x = s.pool.row(0);
        prop_assert_eq!(
            select_scenario1(&s.model, &x, &s.test, &s.w).unwrap(),
            select_scenario1(&s.model, &x, &s.test, &lw).unwrap()
        );
    }

    #[test]
    fn zero_exploration_ucb_is_greedy(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = snapshot(&mut rng, 20);
        let prop = PropensityModel::benchmark();
        let mut ucb = UcbConfig::new(0.0).unwrap();
        ucb.t = 7;
        let a = select_scenario3(&s.model, &s.pool, &prop, &mut ucb).unwrap();
        let g = select_greedy(&s.model, &s.pool, &prop).unwrap();
        prop_assert_eq!(a.index, g.index);
        let by_hand = (0..20).fold((f64::NEG_INFINITY, 0), |b, i| {
            let x = s.pool.row(i);
            let e = prop.evaluate(&x).unwrap();
            let v = e * (s.model.predict(Arm::Treatment, &x).unwrap().0 - s.model.predict(Arm::Control, &x).unwrap().0);
            if v > b.0 { (v, i) } else { b }
        });
        prop_assert_eq!(g.index, by_hand.1);
        let h = select_ucb_with(&s.model, &s.pool, &s.e_pool, 0.0).unwrap();
        prop_assert!(h.index < 20);
    }

    #[test]
    fn sigma_te_dominates_weighted_posterior_spread(
        e in 0.0f64..=1.0, gap in -2.0f64..2.0, v1 in 0.0f64..1.0, v0 in 0.0f64..1.0,
    ) {
        let s = ace_core::acquisition::sigma_te_from_moments(e, gap, v1, v0);
        prop_assert!(s >= 0.0);
        prop_assert!(s * s + 1e-12 >= e * (v1 + v0));
        prop_assert!(s * s <= e * (v1 + v0) + 0.25 * gap * gap + 1e-12);
    }
}
