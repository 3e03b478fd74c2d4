//! Selection rules for the next experiment.
//!
//! The variance-reduction family scores a hypothetical noiseless observation
//! of `μ^(a)(x)` by how much it would shrink the posterior variance of the
//! weighted estimand over the test set:
//!
//! ```text
//! r(x, a; w) = (wᵀ Σ_n^(a)(X_test, x))² / σ_n^(a)(x)²
//! ```
//!
//! Every pool scan walks candidates in ascending index order and arms in
//! control-then-treatment order, keeping the first maximum, so ties resolve
//! to the lowest index and then to the control arm.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AceError, Result};
use crate::kernel_gp::{kernel_matrix, FittedGp, KernelSpec};
use crate::propensity::PropensityModel;
use crate::surrogate::{weights, Arm, TestSet, TwoArmModel, WeightSpec};

/// Floor on the predictive variance in the reduction denominator.
pub const VAR_FLOOR: f64 = 1e-10;

/// Relative gap below which the two arms' scores count as tied in Scenario 1.
pub const ARM_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReductionOptions {
    /// Adds the noise variance to the denominator, i.e. fantasizes a noisy observation.
    #[serde(default)]
    pub noise_adjusted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reduction {
    pub value: f64,
    /// The predictive variance hit [`VAR_FLOOR`].
    pub guarded: bool,
}

/// Candidate set with a without-replacement availability mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    candidates: DMatrix<f64>,
    available: Vec<bool>,
}

impl Pool {
    pub fn new(candidates: DMatrix<f64>) -> Self {
        let n = candidates.nrows();
        Pool {
            candidates,
            available: vec![true; n],
        }
    }

    pub fn with_mask(candidates: DMatrix<f64>, available: Vec<bool>) -> Result<Self> {
        if available.len() != candidates.nrows() {
            return Err(AceError::DimensionMismatch {
                expected: candidates.nrows(),
                got: available.len(),
            });
        }
        Ok(Pool {
            candidates,
            available,
        })
    }

    pub fn candidates(&self) -> &DMatrix<f64> {
        &self.candidates
    }

    pub fn mask(&self) -> &[bool] {
        &self.available
    }

    pub fn len(&self) -> usize {
        self.candidates.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.candidates.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.candidates.row(i).iter().copied().collect()
    }

    pub fn is_available(&self, i: usize) -> bool {
        self.available.get(i).copied().unwrap_or(false)
    }

    pub fn available_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| self.available[*i]).collect()
    }

    pub fn n_available(&self) -> usize {
        self.available.iter().filter(|a| **a).count()
    }

    /// Marks `i` as selected.
    pub fn take(&mut self, i: usize) -> Result<()> {
        match self.available.get_mut(i) {
            Some(slot @ true) => {
                *slot = false;
                Ok(())
            }
            Some(false) => Err(AceError::InvalidArgument(format!("candidate {i} already selected"))),
            None => Err(AceError::InvalidArgument(format!(
                "candidate {i} out of range for pool of {}",
                self.len()
            ))),
        }
    }

    fn available_rows(&self) -> Result<(Vec<usize>, DMatrix<f64>)> {
        let idx = self.available_indices();
        if idx.is_empty() {
            return Err(AceError::PoolExhausted);
        }
        let rows = self.candidates.select_rows(idx.iter());
        Ok((idx, rows))
    }
}

/// Outcome of a pool scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolPick {
    pub index: usize,
    /// Chosen arm when the rule also assigns treatment.
    pub arm: Option<Arm>,
    pub score: f64,
    /// Number of criterion evaluations performed.
    pub evaluations: usize,
}

/// `c_j = Σ_k w_k k(x_k, p_j)` for each row `p_j` of `points`.
pub fn target_kernel_sums(
    kernel: &KernelSpec,
    test: &TestSet,
    w: &DVector<f64>,
    points: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let live: Vec<usize> = (0..test.len()).filter(|k| w[*k] != 0.0).collect();
    let tp = test.points().select_rows(live.iter());
    let wl = DVector::from_iterator(live.len(), live.iter().map(|k| w[*k]));
    Ok(kernel_matrix(kernel, points, &tp)? * wl)
}

/// Variance-reduction scorer for a fixed model snapshot, test set and weights.
pub struct ReductionScorer<'a> {
    model: &'a TwoArmModel,
    test: &'a TestSet,
    w: &'a DVector<f64>,
    /// `L_a⁻¹ Σ₀(X_a, X_test) w` per arm.
    projections: [DVector<f64>; 2],
    opts: ReductionOptions,
}

impl<'a> ReductionScorer<'a> {
    pub fn new(
        model: &'a TwoArmModel,
        test: &'a TestSet,
        w: &'a DVector<f64>,
        opts: ReductionOptions,
    ) -> Result<Self> {
        if w.len() != test.len() {
            return Err(AceError::DimensionMismatch {
                expected: test.len(),
                got: w.len(),
            });
        }
        if test.dim() != model.dim() {
            return Err(AceError::DimensionMismatch {
                expected: model.dim(),
                got: test.dim(),
            });
        }
        let project = |gp: &FittedGp| -> Result<DVector<f64>> {
            if gp.is_empty() {
                return Ok(DVector::zeros(0));
            }
            let k = kernel_matrix(&gp.params().kernel, gp.data().inputs(), test.points())?;
            Ok(gp.solve_lower(&(k * w)))
        };
        Ok(ReductionScorer {
            projections: [project(model.gp(Arm::Control))?, project(model.gp(Arm::Treatment))?],
            model,
            test,
            w,
            opts,
        })
    }

    fn finish(&self, gp: &FittedGp, cross: f64, var: f64) -> Reduction {
        let mut denom = var;
        if self.opts.noise_adjusted {
            denom += gp.params().noise_variance;
        }
        let guarded = denom < VAR_FLOOR;
        Reduction {
            value: cross * cross / denom.max(VAR_FLOOR),
            guarded,
        }
    }

    /// `r(x, a; w)` at a single point.
    pub fn score(&self, arm: Arm, x: &[f64]) -> Result<Reduction> {
        let gp = self.model.gp(arm);
        let kernel = &gp.params().kernel;
        let mut cross = 0.0;
        for k in 0..self.test.len() {
            if self.w[k] != 0.0 {
                cross += self.w[k] * kernel.eval_row(self.test.points(), k, x);
            }
        }
        let mut var = kernel.signal_variance;
        if !gp.is_empty() {
            let v = gp.solve_lower(&gp.kernel_vector(x)?);
            cross -= v.dot(&self.projections[arm.index()]);
            var -= v.norm_squared();
        }
        Ok(self.finish(gp, cross, var.max(0.0)))
    }

    /// Scores every row of `points`. `sums` may carry precomputed
    /// [`target_kernel_sums`] for those rows under this arm's kernel.
    pub fn score_rows(
        &self,
        arm: Arm,
        points: &DMatrix<f64>,
        sums: Option<&DVector<f64>>,
    ) -> Result<Vec<Reduction>> {
        let gp = self.model.gp(arm);
        let kernel = &gp.params().kernel;
        let owned;
        let sums = match sums {
            Some(s) => {
                if s.len() != points.nrows() {
                    return Err(AceError::DimensionMismatch {
                        expected: points.nrows(),
                        got: s.len(),
                    });
                }
                s
            }
            None => {
                owned = target_kernel_sums(kernel, self.test, self.w, points)?;
                &owned
            }
        };
        let m = points.nrows();
        if gp.is_empty() {
            return Ok((0..m)
                .map(|j| self.finish(gp, sums[j], kernel.signal_variance))
                .collect());
        }
        let v = gp.solve_lower_mat(&kernel_matrix(kernel, gp.data().inputs(), points)?);
        let proj = &self.projections[arm.index()];
        Ok((0..m)
            .map(|j| {
                let col = v.column(j);
                let cross = sums[j] - col.dot(proj);
                let var = (kernel.signal_variance - col.norm_squared()).max(0.0);
                self.finish(gp, cross, var)
            })
            .collect())
    }

    /// Scores the available candidates of `pool`; `sums` is indexed by pool row.
    pub fn score_pool(
        &self,
        arm: Arm,
        pool: &Pool,
        sums: Option<&DVector<f64>>,
    ) -> Result<(Vec<usize>, Vec<Reduction>)> {
        let (idx, rows) = pool.available_rows()?;
        let sub = sums.map(|s| DVector::from_iterator(idx.len(), idx.iter().map(|i| s[*i])));
        let scores = self.score_rows(arm, &rows, sub.as_ref())?;
        Ok((idx, scores))
    }
}

/// Variance reduction of the weighted estimand from observing `μ^(a)(x)` exactly.
pub fn variance_reduction(
    model: &TwoArmModel,
    arm: Arm,
    x: &[f64],
    test: &TestSet,
    w: &DVector<f64>,
) -> Result<f64> {
    Ok(ReductionScorer::new(model, test, w, ReductionOptions::default())?
        .score(arm, x)?
        .value)
}

fn pick_arm(model: &TwoArmModel, s0: f64, s1: f64) -> Arm {
    let scale = s0.abs().max(s1.abs());
    if (s1 - s0).abs() <= ARM_TIE_TOL * scale {
        let (n0, n1) = (model.n_obs(Arm::Control), model.n_obs(Arm::Treatment));
        if n1 < n0 {
            Arm::Treatment
        } else {
            Arm::Control
        }
    } else if s1 > s0 {
        Arm::Treatment
    } else {
        Arm::Control
    }
}

/// Scenario 1: the arriving unit's arm with the larger variance reduction.
///
/// Ties go to the arm with fewer observations, then to control.
pub fn select_scenario1(
    model: &TwoArmModel,
    x_new: &[f64],
    test: &TestSet,
    w: &DVector<f64>,
) -> Result<Arm> {
    select_scenario1_with(model, x_new, test, w, ReductionOptions::default())
}

pub fn select_scenario1_with(
    model: &TwoArmModel,
    x_new: &[f64],
    test: &TestSet,
    w: &DVector<f64>,
    opts: ReductionOptions,
) -> Result<Arm> {
    let scorer = ReductionScorer::new(model, test, w, opts)?;
    let r0 = scorer.score(Arm::Control, x_new)?.value;
    let r1 = scorer.score(Arm::Treatment, x_new)?.value;
    Ok(pick_arm(model, r0, r1))
}

/// Scenario 2A: jointly choose the unit and its arm.
pub fn select_scenario2a(
    model: &TwoArmModel,
    pool: &Pool,
    test: &TestSet,
    w: &DVector<f64>,
) -> Result<PoolPick> {
    select_scenario2a_with(model, pool, test, w, ReductionOptions::default(), [None, None])
}

/// As [`select_scenario2a`], with options and per-arm cached target sums
/// (indexed by pool row).
pub fn select_scenario2a_with(
    model: &TwoArmModel,
    pool: &Pool,
    test: &TestSet,
    w: &DVector<f64>,
    opts: ReductionOptions,
    sums: [Option<&DVector<f64>>; 2],
) -> Result<PoolPick> {
    let scorer = ReductionScorer::new(model, test, w, opts)?;
    let (idx, r0) = scorer.score_pool(Arm::Control, pool, sums[0])?;
    let (_, r1) = scorer.score_pool(Arm::Treatment, pool, sums[1])?;
    let mut best: Option<PoolPick> = None;
    for (j, &i) in idx.iter().enumerate() {
        for (arm, r) in [(Arm::Control, r0[j]), (Arm::Treatment, r1[j])] {
            if best.is_none_or(|b| r.value > b.score) {
                best = Some(PoolPick {
                    index: i,
                    arm: Some(arm),
                    score: r.value,
                    evaluations: 0,
                });
            }
        }
    }
    let mut pick = best.ok_or(AceError::PoolExhausted)?;
    pick.evaluations = 2 * idx.len();
    Ok(pick)
}

/// `e r(x, 1; w) + (1 - e) r(x, 0; w)`
pub fn expected_variance_reduction(
    model: &TwoArmModel,
    x: &[f64],
    e_x: f64,
    test: &TestSet,
    w: &DVector<f64>,
) -> Result<f64> {
    check_probability(e_x)?;
    let scorer = ReductionScorer::new(model, test, w, ReductionOptions::default())?;
    let r1 = scorer.score(Arm::Treatment, x)?.value;
    let r0 = scorer.score(Arm::Control, x)?.value;
    Ok(e_x * r1 + (1.0 - e_x) * r0)
}

fn check_probability(e: f64) -> Result<()> {
    if (0.0..=1.0).contains(&e) {
        Ok(())
    } else {
        Err(AceError::InvalidArgument(format!("propensity {e} outside [0, 1]")))
    }
}

/// Scenario 2B: choose the unit maximizing the propensity-weighted expected
/// reduction, with estimand weights recomputed from the current propensity.
pub fn select_scenario2b(
    model: &TwoArmModel,
    pool: &Pool,
    propensity: &PropensityModel,
    spec: WeightSpec,
    test: &TestSet,
) -> Result<PoolPick> {
    let e_test = propensity.evaluate_rows(test.points())?;
    let w_hat = weights(spec, &e_test)?;
    let e_pool = propensity.evaluate_rows(pool.candidates())?;
    select_scenario2b_with(model, pool, &e_pool, test, &w_hat, ReductionOptions::default(), [None, None])
}

/// Lower-level Scenario 2B scan with precomputed pool propensities and weights.
pub fn select_scenario2b_with(
    model: &TwoArmModel,
    pool: &Pool,
    e_pool: &DVector<f64>,
    test: &TestSet,
    w_hat: &DVector<f64>,
    opts: ReductionOptions,
    sums: [Option<&DVector<f64>>; 2],
) -> Result<PoolPick> {
    let scorer = ReductionScorer::new(model, test, w_hat, opts)?;
    let (idx, r0) = scorer.score_pool(Arm::Control, pool, sums[0])?;
    let (_, r1) = scorer.score_pool(Arm::Treatment, pool, sums[1])?;
    argmax_indexed(&idx, |j, i| e_pool[i] * r1[j].value + (1.0 - e_pool[i]) * r0[j].value)
}

fn argmax_indexed(idx: &[usize], mut score: impl FnMut(usize, usize) -> f64) -> Result<PoolPick> {
    let mut best: Option<PoolPick> = None;
    for (j, &i) in idx.iter().enumerate() {
        let s = score(j, i);
        if best.is_none_or(|b| s > b.score) {
            best = Some(PoolPick {
                index: i,
                arm: None,
                score: s,
                evaluations: idx.len(),
            });
        }
    }
    best.ok_or(AceError::PoolExhausted)
}

/// Standard deviation of `1{A=1}(μ¹(x) - μ⁰(x))` with `A ~ Bernoulli(e)`
/// independent of the two Gaussian posteriors.
pub fn sigma_te_from_moments(e_x: f64, mean_gap: f64, var1: f64, var0: f64) -> f64 {
    (e_x * (var1 + var0) + e_x * (1.0 - e_x) * mean_gap * mean_gap)
        .max(0.0)
        .sqrt()
}

pub fn sigma_te(model: &TwoArmModel, x: &[f64], e_x: f64) -> Result<f64> {
    check_probability(e_x)?;
    let (m1, v1) = model.predict(Arm::Treatment, x)?;
    let (m0, v0) = model.predict(Arm::Control, x)?;
    Ok(sigma_te_from_moments(e_x, m1 - m0, v1, v0))
}

pub fn ucb_from_moments(e_x: f64, mean_gap: f64, var1: f64, var0: f64, beta: f64) -> f64 {
    let mut s = e_x * mean_gap;
    if beta > 0.0 {
        s += beta.sqrt() * sigma_te_from_moments(e_x, mean_gap, var1, var0);
    }
    s
}

/// `e(x)(μ¹ₙ(x) - μ⁰ₙ(x)) + √β σ_TE(x)`
pub fn ucb_score(model: &TwoArmModel, x: &[f64], e_x: f64, beta: f64) -> Result<f64> {
    check_probability(e_x)?;
    if beta.is_nan() || beta < 0.0 {
        return Err(AceError::InvalidArgument(format!("beta must be nonnegative, got {beta}")));
    }
    let (m1, v1) = model.predict(Arm::Treatment, x)?;
    let (m0, v0) = model.predict(Arm::Control, x)?;
    Ok(ucb_from_moments(e_x, m1 - m0, v1, v0, beta))
}

/// Exploration schedule `β_t = c² log t`; `t` counts acquisition steps from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UcbConfig {
    pub c: f64,
    pub t: u64,
}

impl Default for UcbConfig {
    fn default() -> Self {
        UcbConfig { c: 0.01, t: 1 }
    }
}

impl UcbConfig {
    pub fn new(c: f64) -> Result<Self> {
        if !(c >= 0.0 && c.is_finite()) {
            return Err(AceError::InvalidArgument(format!("UCB constant must be nonnegative, got {c}")));
        }
        Ok(UcbConfig { c, t: 1 })
    }

    pub fn beta(&self) -> f64 {
        self.c * self.c * (self.t.max(1) as f64).ln()
    }
}

/// Posterior moments of both arms at every available candidate.
struct PoolMoments {
    idx: Vec<usize>,
    mean: [DVector<f64>; 2],
    var: [DVector<f64>; 2],
}

fn pool_moments(model: &TwoArmModel, pool: &Pool) -> Result<PoolMoments> {
    let (idx, rows) = pool.available_rows()?;
    let (m0, v0) = model.gp(Arm::Control).predict_rows(&rows)?;
    let (m1, v1) = model.gp(Arm::Treatment).predict_rows(&rows)?;
    Ok(PoolMoments {
        idx,
        mean: [m0, m1],
        var: [v0, v1],
    })
}

/// Scenario 3: UCB on the expected treated effect with `β_t = c² log t`; advances `t`.
pub fn select_scenario3(
    model: &TwoArmModel,
    pool: &Pool,
    propensity: &PropensityModel,
    ucb: &mut UcbConfig,
) -> Result<PoolPick> {
    let e_pool = propensity.evaluate_rows(pool.candidates())?;
    let pick = select_ucb_with(model, pool, &e_pool, ucb.beta())?;
    ucb.t += 1;
    Ok(pick)
}

pub fn select_ucb_with(
    model: &TwoArmModel,
    pool: &Pool,
    e_pool: &DVector<f64>,
    beta: f64,
) -> Result<PoolPick> {
    let pm = pool_moments(model, pool)?;
    argmax_indexed(&pm.idx, |j, i| {
        ucb_from_moments(e_pool[i], pm.mean[1][j] - pm.mean[0][j], pm.var[1][j], pm.var[0][j], beta)
    })
}

/// Greedy baseline: `e(x)(μ¹ₙ(x) - μ⁰ₙ(x))`.
pub fn select_greedy(model: &TwoArmModel, pool: &Pool, propensity: &PropensityModel) -> Result<PoolPick> {
    let e_pool = propensity.evaluate_rows(pool.candidates())?;
    select_ucb_with(model, pool, &e_pool, 0.0)
}

/// Uniformly random available candidate.
pub fn select_random<R: Rng + ?Sized>(pool: &Pool, rng: &mut R) -> Result<usize> {
    let n = pool.n_available();
    if n == 0 {
        return Err(AceError::PoolExhausted);
    }
    let k = rng.random_range(0..n);
    Ok((0..pool.len())
        .filter(|i| pool.is_available(*i))
        .nth(k)
        .expect("k < number of available candidates"))
}

pub fn random_arm<R: Rng + ?Sized>(rng: &mut R) -> Arm {
    Arm::from_bool(rng.random_bool(0.5))
}

/// ALC for an arriving unit: the arm with the larger posterior variance.
pub fn select_alc_arm(model: &TwoArmModel, x: &[f64]) -> Result<Arm> {
    let (_, v0) = model.predict(Arm::Control, x)?;
    let (_, v1) = model.predict(Arm::Treatment, x)?;
    Ok(if v1 > v0 { Arm::Treatment } else { Arm::Control })
}

/// ALC over a pool and both arms.
pub fn select_alc_pool(model: &TwoArmModel, pool: &Pool) -> Result<PoolPick> {
    let pm = pool_moments(model, pool)?;
    let mut best: Option<PoolPick> = None;
    for (j, &i) in pm.idx.iter().enumerate() {
        for arm in Arm::BOTH {
            let s = pm.var[arm.index()][j];
            if best.is_none_or(|b| s > b.score) {
                best = Some(PoolPick {
                    index: i,
                    arm: Some(arm),
                    score: s,
                    evaluations: 2 * pm.idx.len(),
                });
            }
        }
    }
    best.ok_or(AceError::PoolExhausted)
}

/// Expected ALC: `e(x) σ¹ₙ(x)² + (1 - e(x)) σ⁰ₙ(x)²`.
pub fn select_alc_e(model: &TwoArmModel, pool: &Pool, propensity: &PropensityModel) -> Result<PoolPick> {
    let e_pool = propensity.evaluate_rows(pool.candidates())?;
    select_alc_e_with(model, pool, &e_pool)
}

pub fn select_alc_e_with(model: &TwoArmModel, pool: &Pool, e_pool: &DVector<f64>) -> Result<PoolPick> {
    let pm = pool_moments(model, pool)?;
    argmax_indexed(&pm.idx, |j, i| {
        e_pool[i] * pm.var[1][j] + (1.0 - e_pool[i]) * pm.var[0][j]
    })
}
