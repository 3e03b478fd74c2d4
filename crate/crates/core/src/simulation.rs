//! Benchmark problem, scenario runners and replication metrics.
//!
//! Every replication draws its randomness from independent ChaCha streams of
//! one seed, so different methods run on the same pool, the same arrival
//! order, the same treatment-realization uniforms and the same noise draws.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    random_arm, select_alc_arm, select_alc_e_with, select_alc_pool, select_random,
    select_scenario1_with, select_scenario2a_with, select_scenario2b_with, select_ucb_with,
    target_kernel_sums, Pool, ReductionOptions, UcbConfig,
};
use crate::error::{AceError, Result};
use crate::kernel_gp::{FitConfig, GpHyperParams, KernelSpec};
use crate::propensity::{fit_logistic, KnownPropensity, PropensityModel};
use crate::surrogate::{estimate_qoi, weights, Arm, Observation, TestSet, TwoArmModel, WeightSpec};

/// Seed of the fixed test set shared by every replication.
pub const TEST_SET_SEED: u64 = 0x07e5_75e7;

const STREAM_POOL: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_ASSIGN: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_METHOD: u64 = 5;

/// Modified Franke surface: the last two bumps switch on under treatment.
pub fn franke_mu(x: &[f64], arm: Arm) -> Result<f64> {
    if x.len() != 2 {
        return Err(AceError::DimensionMismatch {
            expected: 2,
            got: x.len(),
        });
    }
    let (u, v) = (9.0 * x[0], 9.0 * x[1]);
    let a = arm.indicator();
    Ok(0.75 * (-0.25 * (u - 2.0).powi(2) - 0.25 * (v - 2.0).powi(2)).exp()
        + 0.75 * (-(u + 1.0).powi(2) / 49.0 - (v + 1.0) / 10.0).exp()
        + 0.5 * a * (-0.25 * (u - 7.0).powi(2) - 0.25 * (v - 3.0).powi(2)).exp()
        - 0.2 * a * (-(u - 4.0).powi(2) - (v - 7.0).powi(2)).exp())
}

/// `sigmoid(-2 + 2 x₁ x₂)`; averages about 0.19 over the unit square.
pub fn true_propensity(x: &[f64]) -> Result<f64> {
    if x.len() != 2 {
        return Err(AceError::DimensionMismatch {
            expected: 2,
            got: x.len(),
        });
    }
    PropensityModel::benchmark().evaluate(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub noise_sd: f64,
    pub propensity: PropensityModel,
}

impl Default for GroundTruth {
    fn default() -> Self {
        GroundTruth {
            noise_sd: 0.05,
            propensity: PropensityModel::benchmark(),
        }
    }
}

impl GroundTruth {
    pub fn new(noise_sd: f64) -> Result<Self> {
        if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
            return Err(AceError::InvalidArgument(format!(
                "noise sd must be finite and nonnegative, got {noise_sd}"
            )));
        }
        Ok(GroundTruth {
            noise_sd,
            ..Default::default()
        })
    }

    pub fn mu(&self, x: &[f64], arm: Arm) -> Result<f64> {
        franke_mu(x, arm)
    }

    pub fn ite(&self, x: &[f64]) -> Result<f64> {
        Ok(franke_mu(x, Arm::Treatment)? - franke_mu(x, Arm::Control)?)
    }

    pub fn propensity(&self, x: &[f64]) -> Result<f64> {
        self.propensity.evaluate(x)
    }

    pub fn sample_outcome<R: Rng + ?Sized>(&self, x: &[f64], arm: Arm, rng: &mut R) -> Result<f64> {
        let z: f64 = rng.sample(StandardNormal);
        Ok(self.mu(x, arm)? + self.noise_sd * z)
    }

    /// Finite-sample estimand over the rows of `points` using the exact surfaces.
    pub fn plug_in_truth(&self, points: &DMatrix<f64>, spec: WeightSpec) -> Result<f64> {
        let rows: Vec<Vec<f64>> = (0..points.nrows())
            .map(|i| points.row(i).iter().copied().collect())
            .collect();
        let e = DVector::from_iterator(
            rows.len(),
            rows.iter().map(|x| self.propensity(x)).collect::<Result<Vec<_>>>()?,
        );
        let w = weights(spec, &e)?;
        let mut num = 0.0;
        for (k, x) in rows.iter().enumerate() {
            if w[k] != 0.0 {
                num += w[k] * self.ite(x)?;
            }
        }
        Ok(num / w.sum())
    }

    /// Ratio Monte-Carlo estimate of the population estimand from `n` uniform points.
    ///
    /// Only weight kinds that are functions of the propensity are supported.
    pub fn monte_carlo_truth(&self, spec: WeightSpec, n: usize, seed: u64) -> Result<MonteCarloTruth> {
        if matches!(spec, WeightSpec::Matching) {
            return Err(AceError::InvalidArgument(
                "matching weights are sample-dependent and have no population value".into(),
            ));
        }
        if n < 2 {
            return Err(AceError::InvalidArgument("Monte-Carlo truth needs at least two points".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = Vec::with_capacity(n);
        let mut ite = Vec::with_capacity(n);
        for _ in 0..n {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            e.push(self.propensity(&x)?);
            ite.push(self.ite(&x)?);
        }
        let w = weights(spec, &DVector::from_vec(e))?;
        let nf = n as f64;
        let mean_w = w.sum() / nf;
        let mean_wy = w.iter().zip(&ite).map(|(w, y)| w * y).sum::<f64>() / nf;
        let estimate = mean_wy / mean_w;
        // Delta method: residuals w_i (y_i - τ̂) / mean(w).
        let var = w
            .iter()
            .zip(&ite)
            .map(|(w, y)| (w * (y - estimate) / mean_w).powi(2))
            .sum::<f64>()
            / (nf - 1.0);
        Ok(MonteCarloTruth {
            estimate,
            std_error: (var / nf).sqrt(),
            n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloTruth {
    pub estimate: f64,
    pub std_error: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    S1,
    S2A,
    S2B,
    S3,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::S1, Scenario::S2A, Scenario::S2B, Scenario::S3];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::S1 => "s1",
            Scenario::S2A => "s2a",
            Scenario::S2B => "s2b",
            Scenario::S3 => "s3",
        }
    }

    /// Methods that can run in this scenario.
    pub fn methods(self) -> &'static [Method] {
        match self {
            Scenario::S1 | Scenario::S2A => &[Method::Random, Method::Alc, Method::Ace],
            Scenario::S2B => &[Method::Random, Method::AlcE, Method::AceE],
            Scenario::S3 => &[Method::Random, Method::Greedy, Method::AceUcb],
        }
    }

    /// The arm is realized by the propensity rather than chosen.
    pub fn observational(self) -> bool {
        matches!(self, Scenario::S2B | Scenario::S3)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = AceError;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| AceError::InvalidArgument(format!("unknown scenario '{s}' (expected s1, s2a, s2b or s3)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Random,
    Alc,
    AlcE,
    Ace,
    AceE,
    AceUcb,
    Greedy,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Random,
        Method::Alc,
        Method::AlcE,
        Method::Ace,
        Method::AceE,
        Method::AceUcb,
        Method::Greedy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Alc => "alc",
            Method::AlcE => "alc_e",
            Method::Ace => "ace",
            Method::AceE => "ace_e",
            Method::AceUcb => "ace_ucb",
            Method::Greedy => "greedy",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = AceError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| AceError::InvalidArgument(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropensityMode {
    #[default]
    Known,
    /// Logistic fit on the selected units' realized arms, refreshed each step.
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub method: Method,
    /// Total number of experiments, initial design included.
    pub n: usize,
    pub n_pool: usize,
    pub n_test: usize,
    /// Initial observations per arm.
    pub n_init: usize,
    pub weight: WeightSpec,
    pub noise_sd: f64,
    /// UCB exploration constant.
    pub c: f64,
    /// Hyperparameters are re-estimated every this many acquisitions; in between
    /// the Cholesky factor is extended in place.
    pub refit_interval: usize,
    /// Optimizer starts for the initial and final fits.
    pub restarts: usize,
    /// Optimizer starts for intermediate refits, the warm start included.
    pub refit_restarts: usize,
    pub propensity_mode: PropensityMode,
    #[serde(default)]
    pub noise_adjusted: bool,
    pub test_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: Scenario::S2A,
            method: Method::Ace,
            n: 100,
            n_pool: 500,
            n_test: 1000,
            n_init: 5,
            weight: WeightSpec::Ate,
            noise_sd: 0.05,
            c: 0.01,
            refit_interval: 1,
            restarts: 10,
            refit_restarts: 10,
            propensity_mode: PropensityMode::Known,
            noise_adjusted: false,
            test_seed: TEST_SET_SEED,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AceError::InvalidArgument(m));
        if !self.scenario.methods().contains(&self.method) {
            let allowed: Vec<&str> = self.scenario.methods().iter().map(|m| m.name()).collect();
            return bad(format!(
                "method: '{}' does not apply to scenario {} (allowed: {})",
                self.method,
                self.scenario,
                allowed.join(", ")
            ));
        }
        if self.n_init == 0 {
            return bad("n_init: must be at least 1".into());
        }
        if 2 * self.n_init > self.n {
            return bad(format!("n: budget {} is below 2 * n_init = {}", self.n, 2 * self.n_init));
        }
        if self.n > self.n_pool {
            return bad(format!("n_pool: {} is smaller than the budget n = {}", self.n_pool, self.n));
        }
        if self.n_test == 0 {
            return bad("n_test: must be at least 1".into());
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd: must be finite and nonnegative, got {}", self.noise_sd));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return bad(format!("c: must be finite and nonnegative, got {}", self.c));
        }
        if self.refit_interval == 0 {
            return bad("refit_interval: must be at least 1".into());
        }
        if self.restarts == 0 || self.refit_restarts == 0 {
            return bad("restarts: must be at least 1".into());
        }
        if let WeightSpec::TruncatedCombined { alpha } = self.weight {
            if !(0.0..0.5).contains(&alpha) {
                return bad(format!("weight: truncation level must be in [0, 0.5), got {alpha}"));
            }
        }
        if matches!(self.scenario, Scenario::S1 | Scenario::S2A) && self.propensity_mode == PropensityMode::Estimated {
            return bad("propensity_mode: estimation needs realized arms (scenarios s2b, s3)".into());
        }
        Ok(())
    }

    /// Label of the reported quantity.
    pub fn estimand(&self) -> String {
        match self.scenario {
            Scenario::S3 => "ite".into(),
            _ => self.weight.name(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Hyperparameter fits performed (both arms count as one).
    pub fits: usize,
    /// Arm fits that returned the default hyperparameters after every start failed.
    pub fit_fallbacks: usize,
    /// Acquisition criterion evaluations.
    pub evaluations: usize,
    /// Propensity fits that hit separation and used the ridge fallback.
    pub propensity_penalized: usize,
    /// Units drawn by the initial design.
    pub initial_draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub seed: u64,
    pub scenario: Scenario,
    pub method: Method,
    pub estimand: String,
    /// Plug-in estimate; absent for s3 or excluded runs.
    pub estimate: Option<f64>,
    /// Test-set estimand under the exact surfaces and propensity.
    pub truth: Option<f64>,
    /// Sum of true effects over selected units whose realized arm is treatment.
    pub cumulative_ite: Option<f64>,
    pub selected: Vec<usize>,
    pub arms: Vec<Arm>,
    pub wall_time_secs: f64,
    pub diagnostics: Diagnostics,
    /// Hyperparameters of the last fit, control arm first.
    pub final_params: Option<[GpHyperParams; 2]>,
    /// Reason the run is left out of aggregates.
    pub excluded: Option<String>,
}

impl ReplicationResult {
    pub fn error(&self) -> Option<f64> {
        Some(self.estimate? - self.truth?)
    }
}

/// Shared random draws of one replication.
struct Draws {
    pool: DMatrix<f64>,
    order: Vec<usize>,
    assign_u: Vec<f64>,
    noise: Vec<[f64; 2]>,
}

impl Draws {
    fn new(n_pool: usize, seed: u64) -> Self {
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let mut r = stream(STREAM_POOL);
        let mut flat = Vec::with_capacity(2 * n_pool);
        for _ in 0..2 * n_pool {
            flat.push(r.random::<f64>());
        }
        let pool = DMatrix::from_row_slice(n_pool, 2, &flat);
        let mut r = stream(STREAM_ORDER);
        let mut order: Vec<usize> = (0..n_pool).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        let mut r = stream(STREAM_ASSIGN);
        let assign_u = (0..n_pool).map(|_| r.random::<f64>()).collect();
        let mut r = stream(STREAM_NOISE);
        let noise = (0..n_pool)
            .map(|_| [r.sample(StandardNormal), r.sample(StandardNormal)])
            .collect();
        Draws {
            pool,
            order,
            assign_u,
            noise,
        }
    }
}

/// Kernel, weights and the pool sums built from them.
type CachedSums = (KernelSpec, DVector<f64>, DVector<f64>);

struct Runner<'a> {
    cfg: &'a ScenarioConfig,
    seed: u64,
    gt: GroundTruth,
    draws: Draws,
    test: TestSet,
    /// Known propensity on the pool rows.
    e_pool_true: DVector<f64>,
    w_true: DVector<f64>,
    pool: Pool,
    obs: Vec<Observation>,
    selected: Vec<usize>,
    arms: Vec<Arm>,
    model: TwoArmModel,
    diag: Diagnostics,
    method_rng: ChaCha8Rng,
    /// Target kernel sums over pool rows per arm, keyed by the kernel and weights they were built for.
    sums_cache: [Option<CachedSums>; 2],
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ScenarioConfig, seed: u64) -> Result<Self> {
        let gt = GroundTruth::new(cfg.noise_sd)?;
        let draws = Draws::new(cfg.n_pool, seed);
        let test = TestSet::uniform(cfg.n_test, 2, cfg.test_seed)?;
        let e_test = gt.propensity.evaluate_rows(test.points())?;
        let w_true = weights(cfg.weight, &e_test)?;
        let e_pool_true = gt.propensity.evaluate_rows(&draws.pool)?;
        let mut method_rng = ChaCha8Rng::seed_from_u64(seed);
        method_rng.set_stream(STREAM_METHOD);
        Ok(Runner {
            pool: Pool::new(draws.pool.clone()),
            gt,
            draws,
            test,
            e_pool_true,
            w_true,
            obs: Vec::new(),
            selected: Vec::new(),
            arms: Vec::new(),
            model: TwoArmModel::prior(2)?,
            diag: Diagnostics::default(),
            method_rng,
            sums_cache: [None, None],
            cfg,
            seed,
        })
    }

    fn x(&self, i: usize) -> Vec<f64> {
        self.pool.row(i)
    }

    fn realized_arm(&self, i: usize) -> Arm {
        Arm::from_bool(self.draws.assign_u[i] < self.e_pool_true[i])
    }

    fn observe(&mut self, i: usize, arm: Arm, update_model: bool) -> Result<()> {
        self.pool.take(i)?;
        let update_model = update_model && self.model_driven();
        let x = self.x(i);
        let y = self.gt.mu(&x, arm)? + self.gt.noise_sd * self.draws.noise[i][arm.index()];
        let o = Observation::new(x, arm, y);
        if update_model {
            self.model = self.model.append(&o)?;
        }
        self.obs.push(o);
        self.selected.push(i);
        self.arms.push(arm);
        Ok(())
    }

    fn fit_config(&self, restarts: usize, round: usize) -> FitConfig {
        FitConfig::default()
            .with_restarts(restarts)
            .with_seed(self.seed.wrapping_mul(1_000_003).wrapping_add(round as u64))
    }

    fn fit(&mut self, restarts: usize, warm: bool) -> Result<()> {
        let cfg = self.fit_config(restarts, self.diag.fits);
        let w = if warm {
            [
                Some(self.model.params(Arm::Control).clone()),
                Some(self.model.params(Arm::Treatment).clone()),
            ]
        } else {
            [None, None]
        };
        let (model, reports) = TwoArmModel::fit(2, &self.obs, &cfg, w)?;
        self.diag.fits += 1;
        self.diag.fit_fallbacks += reports.iter().filter(|r| r.fell_back).count();
        self.model = model;
        Ok(())
    }

    fn initial_design(&mut self) -> Result<()> {
        let n_init = self.cfg.n_init;
        if self.cfg.scenario.observational() {
            let cap = (4 * n_init).min(self.cfg.n);
            let mut counts = [0usize; 2];
            let mut k = 0;
            while k < cap && (counts[0] < n_init || counts[1] < n_init) {
                let i = self.draws.order[k];
                let arm = self.realized_arm(i);
                counts[arm.index()] += 1;
                self.observe(i, arm, false)?;
                k += 1;
            }
        } else {
            for k in 0..2 * n_init {
                let i = self.draws.order[k];
                let arm = if k % 2 == 0 { Arm::Control } else { Arm::Treatment };
                self.observe(i, arm, false)?;
            }
        }
        self.diag.initial_draws = self.selected.len();
        if self.model_driven() {
            self.fit(self.cfg.restarts, false)
        } else {
            Ok(())
        }
    }

    /// Random designs never consult the surrogate, so it is fitted only once at the end.
    fn model_driven(&self) -> bool {
        self.cfg.method != Method::Random
    }

    fn current_propensity(&mut self) -> Result<DVector<f64>> {
        match self.cfg.propensity_mode {
            PropensityMode::Known => Ok(self.e_pool_true.clone()),
            PropensityMode::Estimated => {
                let model = self.estimated_propensity()?;
                model.evaluate_rows(self.pool.candidates())
            }
        }
    }

    fn estimated_propensity(&mut self) -> Result<PropensityModel> {
        let xs: Vec<Vec<f64>> = self.obs.iter().map(|o| o.x.clone()).collect();
        let arms: Vec<Arm> = self.obs.iter().map(|o| o.arm).collect();
        match fit_logistic(&xs, &arms, true) {
            Ok(est) => {
                if est.penalized {
                    self.diag.propensity_penalized += 1;
                }
                Ok(est.model)
            }
            Err(AceError::InvalidArgument(_)) => {
                let treated = arms.iter().filter(|a| **a == Arm::Treatment).count();
                let p = (treated as f64 + 0.5) / (arms.len() as f64 + 1.0);
                Ok(PropensityModel::Known(KnownPropensity::Constant { p }))
            }
            Err(e) => Err(e),
        }
    }

    fn target_sums(&mut self, arm: Arm, w: &DVector<f64>) -> Result<DVector<f64>> {
        let kernel = &self.model.params(arm).kernel;
        if let Some((k, cw, s)) = &self.sums_cache[arm.index()] {
            if k == kernel && cw == w {
                return Ok(s.clone());
            }
        }
        let s = target_kernel_sums(kernel, &self.test, w, self.pool.candidates())?;
        self.sums_cache[arm.index()] = Some((kernel.clone(), w.clone(), s.clone()));
        Ok(s)
    }

    fn opts(&self) -> ReductionOptions {
        ReductionOptions {
            noise_adjusted: self.cfg.noise_adjusted,
        }
    }

    fn step_s1(&mut self, k: usize) -> Result<()> {
        let i = self.draws.order[k];
        let x = self.x(i);
        let arm = match self.cfg.method {
            Method::Random => random_arm(&mut self.method_rng),
            Method::Alc => select_alc_arm(&self.model, &x)?,
            Method::Ace => select_scenario1_with(&self.model, &x, &self.test, &self.w_true, self.opts())?,
            m => unreachable!("validated method {m}"),
        };
        self.diag.evaluations += 2;
        self.observe(i, arm, true)
    }

    fn step_s2a(&mut self) -> Result<()> {
        let (i, arm) = match self.cfg.method {
            Method::Random => {
                let i = select_random(&self.pool, &mut self.method_rng)?;
                (i, random_arm(&mut self.method_rng))
            }
            Method::Alc => {
                let p = select_alc_pool(&self.model, &self.pool)?;
                self.diag.evaluations += p.evaluations;
                (p.index, p.arm.expect("pool ALC assigns an arm"))
            }
            Method::Ace => {
                let w = self.w_true.clone();
                let s0 = self.target_sums(Arm::Control, &w)?;
                let s1 = self.target_sums(Arm::Treatment, &w)?;
                let p = select_scenario2a_with(&self.model, &self.pool, &self.test, &w, self.opts(), [Some(&s0), Some(&s1)])?;
                self.diag.evaluations += p.evaluations;
                (p.index, p.arm.expect("scenario 2A assigns an arm"))
            }
            m => unreachable!("validated method {m}"),
        };
        self.observe(i, arm, true)
    }

    fn step_observational(&mut self, ucb: &mut UcbConfig) -> Result<()> {
        let i = match self.cfg.method {
            Method::Random => select_random(&self.pool, &mut self.method_rng)?,
            Method::AlcE => {
                let e = self.current_propensity()?;
                let p = select_alc_e_with(&self.model, &self.pool, &e)?;
                self.diag.evaluations += p.evaluations;
                p.index
            }
            Method::AceE => {
                let (e_pool, w) = match self.cfg.propensity_mode {
                    PropensityMode::Known => (self.e_pool_true.clone(), self.w_true.clone()),
                    PropensityMode::Estimated => {
                        let model = self.estimated_propensity()?;
                        let e_test = model.evaluate_rows(self.test.points())?;
                        (model.evaluate_rows(self.pool.candidates())?, weights(self.cfg.weight, &e_test)?)
                    }
                };
                let s0 = self.target_sums(Arm::Control, &w)?;
                let s1 = self.target_sums(Arm::Treatment, &w)?;
                let p = select_scenario2b_with(
                    &self.model,
                    &self.pool,
                    &e_pool,
                    &self.test,
                    &w,
                    self.opts(),
                    [Some(&s0), Some(&s1)],
                )?;
                self.diag.evaluations += p.evaluations;
                p.index
            }
            Method::Greedy | Method::AceUcb => {
                let e = self.current_propensity()?;
                let beta = if self.cfg.method == Method::Greedy { 0.0 } else { ucb.beta() };
                let p = select_ucb_with(&self.model, &self.pool, &e, beta)?;
                ucb.t += 1;
                self.diag.evaluations += p.evaluations;
                p.index
            }
            m => unreachable!("validated method {m}"),
        };
        let arm = self.realized_arm(i);
        self.observe(i, arm, true)
    }

    fn run(&mut self) -> Result<()> {
        self.initial_design()?;
        let mut ucb = UcbConfig::new(self.cfg.c)?;
        let mut step = 0;
        while self.selected.len() < self.cfg.n {
            if self.model_driven() && step > 0 && step % self.cfg.refit_interval == 0 {
                self.fit(self.cfg.refit_restarts, true)?;
            }
            match self.cfg.scenario {
                Scenario::S1 => self.step_s1(self.selected.len())?,
                Scenario::S2A => self.step_s2a()?,
                Scenario::S2B | Scenario::S3 => self.step_observational(&mut ucb)?,
            }
            step += 1;
        }
        Ok(())
    }

    fn estimate(&mut self) -> Result<f64> {
        self.fit(self.cfg.restarts, self.model_driven())?;
        let w = match (self.cfg.scenario, self.cfg.propensity_mode) {
            (Scenario::S2B, PropensityMode::Estimated) => {
                let model = self.estimated_propensity()?;
                weights(self.cfg.weight, &model.evaluate_rows(self.test.points())?)?
            }
            _ => self.w_true.clone(),
        };
        estimate_qoi(&self.model, &self.test, &w)
    }

    fn cumulative_ite(&self) -> Result<f64> {
        let mut total = 0.0;
        for o in &self.obs {
            if o.arm == Arm::Treatment {
                total += self.gt.ite(&o.x)?;
            }
        }
        Ok(total)
    }
}

/// Runs one replication of `config` with `seed`.
///
/// Invalid configurations are errors; numerical failures inside the run
/// produce a result flagged as excluded.
pub fn run_replication(config: &ScenarioConfig, seed: u64) -> Result<ReplicationResult> {
    config.validate()?;
    let start = Instant::now();
    let mut runner = Runner::new(config, seed)?;
    let truth = match config.scenario {
        Scenario::S3 => None,
        _ => Some(runner.gt.plug_in_truth(runner.test.points(), config.weight)?),
    };
    let outcome = runner.run().and_then(|_| match config.scenario {
        Scenario::S3 => Ok((None, Some(runner.cumulative_ite()?))),
        _ => Ok((Some(runner.estimate()?), None)),
    });
    let (estimate, cumulative_ite, excluded) = match outcome {
        Ok((e, c)) => (e, c, None),
        Err(AceError::NumericalFailure(msg)) => (None, None, Some(msg)),
        Err(e) => return Err(e),
    };
    Ok(ReplicationResult {
        seed,
        scenario: config.scenario,
        method: config.method,
        estimand: config.estimand(),
        estimate,
        truth,
        cumulative_ite,
        selected: runner.selected,
        arms: runner.arms,
        wall_time_secs: start.elapsed().as_secs_f64(),
        diagnostics: runner.diag,
        final_params: Some([
            runner.model.params(Arm::Control).clone(),
            runner.model.params(Arm::Treatment).clone(),
        ]),
        excluded,
    })
}

/// Minimum, quartiles and maximum with linear interpolation between order statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(FiveNumber {
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub replications: usize,
    pub excluded: usize,
    pub bias: Option<f64>,
    pub rmse: Option<f64>,
    /// Cumulative-ITE distribution for scenario 3.
    pub cumulative_ite: Option<FiveNumber>,
}

impl Metrics {
    pub fn bias_e3(&self) -> Option<f64> {
        self.bias.map(|b| 1e3 * b)
    }

    pub fn rmse_e3(&self) -> Option<f64> {
        self.rmse.map(|r| 1e3 * r)
    }
}

/// Bias, RMSE and cumulative-ITE summary over the non-excluded results.
pub fn aggregate(results: &[ReplicationResult]) -> Metrics {
    let kept: Vec<&ReplicationResult> = results.iter().filter(|r| r.excluded.is_none()).collect();
    let errors: Vec<f64> = kept.iter().filter_map(|r| r.error()).collect();
    let (bias, rmse) = if errors.is_empty() {
        (None, None)
    } else {
        let n = errors.len() as f64;
        (
            Some(errors.iter().sum::<f64>() / n),
            Some((errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt()),
        )
    };
    let ites: Vec<f64> = kept.iter().filter_map(|r| r.cumulative_ite).collect();
    Metrics {
        replications: results.len(),
        excluded: results.len() - kept.len(),
        bias,
        rmse,
        cumulative_ite: FiveNumber::from_values(&ites),
    }
}
