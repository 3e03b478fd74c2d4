//! Two-arm potential-outcome model, estimand weights and plug-in estimates.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AceError, Result};
use crate::kernel_gp::{fit_mle, FitConfig, FitReport, FittedGp, GpHyperParams, TrainingSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Arm {
    Control = 0,
    Treatment = 1,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Treatment];

    pub fn from_bool(treated: bool) -> Self {
        if treated {
            Arm::Treatment
        } else {
            Arm::Control
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn indicator(self) -> f64 {
        self.index() as f64
    }

    pub fn other(self) -> Arm {
        match self {
            Arm::Control => Arm::Treatment,
            Arm::Treatment => Arm::Control,
        }
    }
}

impl TryFrom<u8> for Arm {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            0 => Ok(Arm::Control),
            1 => Ok(Arm::Treatment),
            _ => Err(format!("arm must be 0 or 1, got {v}")),
        }
    }
}

impl From<Arm> for u8 {
    fn from(a: Arm) -> u8 {
        a as u8
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// One experimental record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    #[serde(rename = "a")]
    pub arm: Arm,
    pub y: f64,
}

impl Observation {
    pub fn new(x: Vec<f64>, arm: Arm, y: f64) -> Self {
        Observation { x, arm, y }
    }
}

/// Independent GP posteriors for the control and treated outcome surfaces.
///
/// An arm without observations answers queries from its prior; see
/// [`TwoArmModel::has_data`].
#[derive(Debug, Clone)]
pub struct TwoArmModel {
    arms: [FittedGp; 2],
}

fn split_by_arm(dim: usize, obs: &[Observation]) -> Result<[TrainingSet; 2]> {
    let mut rows: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut ys: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for o in obs {
        if o.x.len() != dim {
            return Err(AceError::DimensionMismatch {
                expected: dim,
                got: o.x.len(),
            });
        }
        rows[o.arm.index()].push(o.x.clone());
        ys[o.arm.index()].push(o.y);
    }
    let make = |a: usize| -> Result<TrainingSet> {
        if rows[a].is_empty() {
            Ok(TrainingSet::empty(dim))
        } else {
            TrainingSet::from_rows(&rows[a], &ys[a])
        }
    };
    Ok([make(0)?, make(1)?])
}

impl TwoArmModel {
    /// Both arms at their default prior.
    pub fn prior(dim: usize) -> Result<Self> {
        let p = GpHyperParams::default_for(dim);
        Ok(TwoArmModel {
            arms: [FittedGp::prior(p.clone())?, FittedGp::prior(p)?],
        })
    }

    pub fn from_arms(control: FittedGp, treated: FittedGp) -> Result<Self> {
        if control.dim() != treated.dim() {
            return Err(AceError::DimensionMismatch {
                expected: control.dim(),
                got: treated.dim(),
            });
        }
        Ok(TwoArmModel {
            arms: [control, treated],
        })
    }

    /// Conditions fixed hyperparameters on the observations.
    pub fn with_params(
        dim: usize,
        obs: &[Observation],
        params: [GpHyperParams; 2],
    ) -> Result<Self> {
        let [d0, d1] = split_by_arm(dim, obs)?;
        let [p0, p1] = params;
        Self::from_arms(FittedGp::new(p0, d0)?, FittedGp::new(p1, d1)?)
    }

    /// Fits each arm's hyperparameters by maximum likelihood.
    ///
    /// `warm` seeds the optimizer per arm; the arms use distinct derived seeds.
    pub fn fit(
        dim: usize,
        obs: &[Observation],
        cfg: &FitConfig,
        warm: [Option<GpHyperParams>; 2],
    ) -> Result<(Self, [FitReport; 2])> {
        let data = split_by_arm(dim, obs)?;
        let mut reports = Vec::with_capacity(2);
        let mut gps = Vec::with_capacity(2);
        for (a, (d, w)) in data.into_iter().zip(warm).enumerate() {
            let arm_cfg = cfg
                .clone()
                .with_seed(cfg.seed.wrapping_mul(2).wrapping_add(a as u64))
                .with_warm_start(w);
            let report = fit_mle(&d, &arm_cfg)?;
            gps.push(FittedGp::new(report.params.clone(), d)?);
            reports.push(report);
        }
        let treated = gps.pop().expect("two arms");
        let control = gps.pop().expect("two arms");
        let r1 = reports.pop().expect("two arms");
        let r0 = reports.pop().expect("two arms");
        Ok((Self::from_arms(control, treated)?, [r0, r1]))
    }

    /// Refits both arms on their current data, warm-started at the current hyperparameters.
    pub fn refit(&self, cfg: &FitConfig) -> Result<(Self, [FitReport; 2])> {
        let obs = self.observations();
        let warm = [
            Some(self.arms[0].params().clone()),
            Some(self.arms[1].params().clone()),
        ];
        Self::fit(self.dim(), &obs, cfg, warm)
    }

    /// New snapshot with one more observation; the other arm is shared unchanged.
    pub fn append(&self, obs: &Observation) -> Result<Self> {
        let mut arms = self.arms.clone();
        arms[obs.arm.index()] = self.arms[obs.arm.index()].append(&obs.x, obs.y)?;
        Ok(TwoArmModel { arms })
    }

    pub fn gp(&self, arm: Arm) -> &FittedGp {
        &self.arms[arm.index()]
    }

    pub fn params(&self, arm: Arm) -> &GpHyperParams {
        self.arms[arm.index()].params()
    }

    pub fn n_obs(&self, arm: Arm) -> usize {
        self.arms[arm.index()].len()
    }

    /// False when queries on this arm fall back to the prior.
    pub fn has_data(&self, arm: Arm) -> bool {
        !self.arms[arm.index()].is_empty()
    }

    pub fn dim(&self) -> usize {
        self.arms[0].dim()
    }

    /// All observations, control arm first.
    pub fn observations(&self) -> Vec<Observation> {
        let mut out = Vec::new();
        for arm in Arm::BOTH {
            let d = self.gp(arm).data();
            for i in 0..d.len() {
                out.push(Observation {
                    x: d.inputs().row(i).iter().copied().collect(),
                    arm,
                    y: d.outputs()[i],
                });
            }
        }
        out
    }

    /// Posterior mean and variance of `μ^(a)(x)`.
    pub fn predict(&self, arm: Arm, x: &[f64]) -> Result<(f64, f64)> {
        self.gp(arm).predict(x)
    }

    fn require_both(&self) -> Result<()> {
        for arm in Arm::BOTH {
            if !self.has_data(arm) {
                return Err(AceError::State(format!("arm {arm} has no observations")));
            }
        }
        Ok(())
    }
}

/// Representative sample of the target population, one row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    points: DMatrix<f64>,
}

impl TestSet {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(AceError::InvalidArgument("test set needs at least one point".into()));
        }
        Ok(TestSet { points })
    }

    /// `n` iid uniform points on the unit hypercube.
    pub fn uniform(n: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(DMatrix::from_fn(n, dim, |_, _| rng.random::<f64>()))
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.points.row(i).iter().copied().collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        write_points_csv(&self.points, w)
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        Self::new(read_points_csv(r)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Writes points as CSV with header `x1,…,xd`.
pub fn write_points_csv<W: std::io::Write>(points: &DMatrix<f64>, w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    wr.write_record((1..=points.ncols()).map(|k| format!("x{k}")))?;
    for i in 0..points.nrows() {
        wr.write_record(points.row(i).iter().map(|v| format!("{v}")))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_points_csv<R: std::io::Read>(r: R) -> Result<DMatrix<f64>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers()?.clone();
    let d = headers.len();
    for (k, h) in headers.iter().enumerate() {
        if h.trim() != format!("x{}", k + 1) {
            return Err(AceError::InvalidArgument(format!(
                "expected column header x{}, found {h:?}",
                k + 1
            )));
        }
    }
    let mut data = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        if rec.len() != d {
            return Err(AceError::InvalidArgument(format!("row {} has {} fields", line + 1, rec.len())));
        }
        for f in rec.iter() {
            data.push(f.trim().parse::<f64>().map_err(|e| {
                AceError::InvalidArgument(format!("row {}: {f:?}: {e}", line + 1))
            })?);
        }
    }
    Ok(DMatrix::from_row_slice(data.len() / d.max(1), d, &data))
}

/// Estimand-defining weight function over the target population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum WeightSpec {
    /// `w = 1`
    Ate,
    /// `w = e`
    Atte,
    /// `w = e(1 - e)`
    Ato,
    /// `w = 1{α < e < 1 - α}`
    TruncatedCombined { alpha: f64 },
    /// `w = min(e, 1 - e)`
    Matching,
}

impl WeightSpec {
    pub fn uses_propensity(&self) -> bool {
        !matches!(self, WeightSpec::Ate)
    }

    pub fn name(&self) -> String {
        self.to_string()
    }

    fn weight(&self, e: f64) -> f64 {
        match *self {
            WeightSpec::Ate => 1.0,
            WeightSpec::Atte => e,
            WeightSpec::Ato => e * (1.0 - e),
            WeightSpec::TruncatedCombined { alpha } => {
                if alpha < e && e < 1.0 - alpha {
                    1.0
                } else {
                    0.0
                }
            }
            WeightSpec::Matching => e.min(1.0 - e),
        }
    }
}

impl fmt::Display for WeightSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightSpec::Ate => write!(f, "ate"),
            WeightSpec::Atte => write!(f, "atte"),
            WeightSpec::Ato => write!(f, "ato"),
            WeightSpec::TruncatedCombined { alpha } => write!(f, "truncated:{alpha}"),
            WeightSpec::Matching => write!(f, "matching"),
        }
    }
}

impl FromStr for WeightSpec {
    type Err = AceError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "ate" => Ok(WeightSpec::Ate),
            "atte" | "att" => Ok(WeightSpec::Atte),
            "ato" => Ok(WeightSpec::Ato),
            "matching" => Ok(WeightSpec::Matching),
            _ => {
                let alpha = s
                    .strip_prefix("truncated:")
                    .ok_or_else(|| AceError::InvalidArgument(format!("unknown estimand {s:?}")))?
                    .parse::<f64>()
                    .map_err(|e| AceError::InvalidArgument(format!("truncation level: {e}")))?;
                if !(alpha > 0.0 && alpha < 0.5) {
                    return Err(AceError::InvalidArgument(format!(
                        "truncation level must lie in (0, 0.5), got {alpha}"
                    )));
                }
                Ok(WeightSpec::TruncatedCombined { alpha })
            }
        }
    }
}

impl TryFrom<String> for WeightSpec {
    type Error = AceError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WeightSpec> for String {
    fn from(w: WeightSpec) -> String {
        w.to_string()
    }
}

/// Per-point weights of the estimand given propensities on the test set.
pub fn weights(spec: WeightSpec, e: &DVector<f64>) -> Result<DVector<f64>> {
    if spec.uses_propensity() {
        if let Some(bad) = e.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(AceError::InvalidArgument(format!(
                "propensity must lie in (0, 1), got {bad}"
            )));
        }
    }
    let w = e.map(|v| spec.weight(v));
    if w.iter().all(|v| *v == 0.0) {
        return Err(AceError::EmptyTarget);
    }
    Ok(w)
}

fn check_weights(test: &TestSet, w: &DVector<f64>) -> Result<f64> {
    if w.len() != test.len() {
        return Err(AceError::DimensionMismatch {
            expected: test.len(),
            got: w.len(),
        });
    }
    if w.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(AceError::InvalidArgument("weights must be finite and nonnegative".into()));
    }
    let total = w.sum();
    if total <= 0.0 {
        return Err(AceError::EmptyTarget);
    }
    Ok(total)
}

/// Plug-in estimate `Σ w_k (m₁(x_k) - m₀(x_k)) / Σ w_k` from posterior means.
pub fn estimate_qoi(model: &TwoArmModel, test: &TestSet, w: &DVector<f64>) -> Result<f64> {
    model.require_both()?;
    let total = check_weights(test, w)?;
    let m1 = model.gp(Arm::Treatment).mean_at(test.points())?;
    let m0 = model.gp(Arm::Control).mean_at(test.points())?;
    Ok(w.dot(&(m1 - m0)) / total)
}

/// `wᵀ Σ_n w` for one arm without forming the test-set covariance.
pub(crate) fn weighted_posterior_quadratic(
    gp: &FittedGp,
    test: &TestSet,
    w: &DVector<f64>,
) -> Result<f64> {
    let kernel = &gp.params().kernel;
    let pts = test.points();
    let n = pts.nrows();
    let mut prior = 0.0;
    for j in 0..n {
        if w[j] == 0.0 {
            continue;
        }
        let mut s = 0.5 * w[j] * kernel.signal_variance;
        for i in (j + 1)..n {
            if w[i] != 0.0 {
                s += w[i] * kernel.eval_iter(pts.row(i).iter().copied(), pts.row(j).iter().copied());
            }
        }
        prior += 2.0 * w[j] * s;
    }
    if gp.is_empty() {
        return Ok(prior.max(0.0));
    }
    let kxt = crate::kernel_gp::kernel_matrix(kernel, gp.data().inputs(), pts)?;
    let g = gp.solve_lower(&(kxt * w));
    Ok((prior - g.norm_squared()).max(0.0))
}

/// Posterior variance of the plug-in estimate, treating the arms as independent.
pub fn qoi_posterior_variance(model: &TwoArmModel, test: &TestSet, w: &DVector<f64>) -> Result<f64> {
    model.require_both()?;
    let total = check_weights(test, w)?;
    let v1 = weighted_posterior_quadratic(model.gp(Arm::Treatment), test, w)?;
    let v0 = weighted_posterior_quadratic(model.gp(Arm::Control), test, w)?;
    Ok((v1 + v0) / (total * total))
}
