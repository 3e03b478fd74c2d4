//! Turn-based advisory sessions over line-delimited JSON.
//!
//! The session file holds everything a recommendation depends on, so a
//! recommendation is a pure function of the persisted state. Each accepted
//! `observe` refits both surrogates and rewrites the file; rejected lines
//! leave it untouched.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ace_core::acquisition::{
    select_scenario1_with, select_scenario2a_with, select_scenario2b_with, select_ucb_with, Pool,
    ReductionOptions, UcbConfig,
};
use ace_core::kernel_gp::{FitConfig, GpHyperParams};
use ace_core::propensity::{fit_logistic, KnownPropensity, PropensityModel};
use ace_core::simulation::{PropensityMode, Scenario};
use ace_core::surrogate::{
    estimate_qoi, qoi_posterior_variance, read_points_csv, weights, write_points_csv, Arm, Observation,
    TestSet, TwoArmModel, WeightSpec,
};
use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const SESSION_VERSION: u32 = 1;

/// Tolerance for matching an observed `x` against its pool row.
const ROW_MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Session {
    pub version: u32,
    pub scenario: Scenario,
    pub weight: WeightSpec,
    pub propensity_mode: PropensityMode,
    /// Assignment mechanism used when `propensity_mode` is known.
    pub propensity: PropensityModel,
    pub dim: usize,
    /// Paths are relative to the session file's directory unless absolute.
    pub pool_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub observations: Vec<Observation>,
    /// Pool rows already used, in order of observation.
    pub taken: Vec<usize>,
    /// Number of accepted observations since the session was created.
    pub step: u64,
    /// Current hyperparameters, control arm first; defaults until the first fit.
    pub params: Option<[GpHyperParams; 2]>,
    pub c: f64,
    pub restarts: usize,
    pub seed: u64,
    pub noise_adjusted: bool,
}

#[derive(Debug, Clone)]
pub struct InitOptions {
    pub scenario: Scenario,
    pub weight: WeightSpec,
    pub propensity_mode: PropensityMode,
    pub pool: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Generate this many uniform pool points next to the session file.
    pub pool_uniform: Option<usize>,
    pub test_uniform: Option<usize>,
    pub dim: usize,
    pub c: f64,
    pub restarts: usize,
    pub seed: u64,
    pub noise_adjusted: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            scenario: Scenario::S2A,
            weight: WeightSpec::Ate,
            propensity_mode: PropensityMode::Known,
            pool: None,
            test: None,
            pool_uniform: None,
            test_uniform: None,
            dim: 2,
            c: 0.01,
            restarts: 10,
            seed: 0,
            noise_adjusted: false,
        }
    }
}

fn session_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn relative_to(base: &Path, p: &Path) -> PathBuf {
    let abs = |q: &Path| fs::canonicalize(q).unwrap_or_else(|_| q.to_path_buf());
    let (b, q) = (abs(base), abs(p));
    q.strip_prefix(&b).map(Path::to_path_buf).unwrap_or(q)
}

fn uniform_points(n: usize, dim: usize, seed: u64, stream: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let flat: Vec<f64> = (0..n * dim).map(|_| rng.random()).collect();
    DMatrix::from_row_slice(n, dim, &flat)
}

/// Creates a session file, generating pool or test CSVs beside it when requested.
pub fn init_session(path: &Path, opts: &InitOptions) -> Result<Session> {
    if path.exists() {
        bail!("session file {} already exists", path.display());
    }
    let dir = session_dir(path);
    fs::create_dir_all(&dir)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("session");
    let place = |given: &Option<PathBuf>, generate: Option<usize>, name: &str, stream: u64| -> Result<Option<PathBuf>> {
        match (given, generate) {
            (Some(_), Some(_)) => bail!("give either a {name} file or a generated {name} size, not both"),
            (Some(p), None) => {
                if !p.exists() {
                    bail!("{name} file {} does not exist", p.display());
                }
                Ok(Some(relative_to(&dir, p)))
            }
            (None, Some(n)) => {
                if n == 0 {
                    bail!("generated {name} must have at least one point");
                }
                let file = PathBuf::from(format!("{stem}.{name}.csv"));
                let f = fs::File::create(dir.join(&file))?;
                write_points_csv(&uniform_points(n, opts.dim, opts.seed, stream), f)?;
                Ok(Some(file))
            }
            (None, None) => Ok(None),
        }
    };
    let pool_csv = place(&opts.pool, opts.pool_uniform, "pool", 1)?;
    let test_csv = place(&opts.test, opts.test_uniform, "test", 2)?;
    let needs_pool = opts.scenario != Scenario::S1;
    let needs_test = opts.scenario != Scenario::S3;
    if needs_pool && pool_csv.is_none() {
        bail!("scenario {} needs a candidate pool (--pool or --pool-uniform)", opts.scenario);
    }
    if needs_test && test_csv.is_none() {
        bail!("scenario {} needs a test set (--test or --test-uniform)", opts.scenario);
    }
    if matches!(opts.scenario, Scenario::S1 | Scenario::S2A) && opts.propensity_mode == PropensityMode::Estimated {
        bail!("propensity estimation needs realized arms (scenarios s2b, s3)");
    }
    let session = Session {
        version: SESSION_VERSION,
        scenario: opts.scenario,
        weight: opts.weight,
        propensity_mode: opts.propensity_mode,
        propensity: PropensityModel::benchmark(),
        dim: opts.dim,
        pool_csv,
        test_csv,
        observations: Vec::new(),
        taken: Vec::new(),
        step: 0,
        params: None,
        c: opts.c,
        restarts: opts.restarts,
        seed: opts.seed,
        noise_adjusted: opts.noise_adjusted,
    };
    let ctx = Advisor::from_session(session, &dir)?;
    ctx.save(path)?;
    Ok(ctx.session)
}

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Request {
    Recommend {
        #[serde(default)]
        x: Option<Vec<f64>>,
    },
    Observe {
        x: Vec<f64>,
        a: u8,
        y: f64,
        #[serde(default)]
        unit_index: Option<usize>,
    },
    Estimate,
    State,
}

/// A loaded session with its pool and test set.
#[derive(Debug, Clone)]
pub struct Advisor {
    pub session: Session,
    pool: Option<Pool>,
    test: Option<TestSet>,
}

impl Advisor {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading session {}", path.display()))?;
        let session: Session = serde_json::from_str(&text).with_context(|| format!("parsing session {}", path.display()))?;
        if session.version != SESSION_VERSION {
            bail!("unsupported session version {}", session.version);
        }
        Self::from_session(session, &session_dir(path))
    }

    pub fn from_session(session: Session, dir: &Path) -> Result<Self> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { dir.join(p) };
        let pool = match &session.pool_csv {
            Some(p) => {
                let f = fs::File::open(resolve(p)).with_context(|| format!("opening pool {}", p.display()))?;
                let pts = read_points_csv(f)?;
                if pts.ncols() != session.dim {
                    bail!("pool has {} columns, session dimension is {}", pts.ncols(), session.dim);
                }
                let mut mask = vec![true; pts.nrows()];
                for &i in &session.taken {
                    *mask.get_mut(i).ok_or_else(|| anyhow!("taken index {i} outside the pool"))? = false;
                }
                Some(Pool::with_mask(pts, mask)?)
            }
            None => None,
        };
        let test = match &session.test_csv {
            Some(p) => {
                let t = TestSet::load(&resolve(p))?;
                if t.dim() != session.dim {
                    bail!("test set has {} columns, session dimension is {}", t.dim(), session.dim);
                }
                Some(t)
            }
            None => None,
        };
        Ok(Advisor { session, pool, test })
    }

    /// Atomically rewrites the session file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&self.session)? + "\n")?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn model(&self) -> Result<TwoArmModel> {
        let s = &self.session;
        let params = s.params.clone().unwrap_or_else(|| {
            let d = GpHyperParams::default_for(s.dim);
            [d.clone(), d]
        });
        Ok(TwoArmModel::with_params(s.dim, &s.observations, params)?)
    }

    pub fn pool(&self) -> Option<&Pool> {
        self.pool.as_ref()
    }

    pub fn test(&self) -> Option<&TestSet> {
        self.test.as_ref()
    }

    /// Propensity model in force: the stored one, or a logistic fit on the observations.
    pub fn propensity(&self) -> Result<PropensityModel> {
        let s = &self.session;
        match s.propensity_mode {
            PropensityMode::Known => Ok(s.propensity.clone()),
            PropensityMode::Estimated => {
                let xs: Vec<Vec<f64>> = s.observations.iter().map(|o| o.x.clone()).collect();
                let arms: Vec<Arm> = s.observations.iter().map(|o| o.arm).collect();
                match fit_logistic(&xs, &arms, true) {
                    Ok(est) => Ok(est.model),
                    Err(_) => {
                        let treated = arms.iter().filter(|a| **a == Arm::Treatment).count();
                        let p = (treated as f64 + 0.5) / (arms.len() as f64 + 1.0);
                        Ok(PropensityModel::Known(KnownPropensity::Constant { p }))
                    }
                }
            }
        }
    }

    fn target_weights(&self, test: &TestSet) -> Result<DVector<f64>> {
        let e = if self.session.weight.uses_propensity() {
            self.propensity()?.evaluate_rows(test.points())?
        } else {
            DVector::from_element(test.len(), 0.5)
        };
        Ok(weights(self.session.weight, &e)?)
    }

    fn warning(&self, model: &TwoArmModel) -> Option<String> {
        let empty: Vec<String> = Arm::BOTH
            .iter()
            .filter(|a| !model.has_data(**a))
            .map(|a| a.to_string())
            .collect();
        let who = match empty.as_slice() {
            [] => return None,
            [a] => format!("arm {a} has"),
            _ => "both arms have".to_string(),
        };
        Some(format!("{who} no observations; recommendations rely on prior hyperparameters"))
    }

    fn need_pool(&self) -> Result<&Pool> {
        self.pool.as_ref().ok_or_else(|| anyhow!("session has no candidate pool"))
    }

    fn need_test(&self) -> Result<&TestSet> {
        self.test.as_ref().ok_or_else(|| anyhow!("session has no test set"))
    }

    /// UCB step index for the next recommendation.
    pub fn ucb(&self) -> Result<UcbConfig> {
        let mut u = UcbConfig::new(self.session.c)?;
        u.t = self.session.step + 1;
        Ok(u)
    }

    pub fn recommend(&self, x: Option<&[f64]>) -> Result<Value> {
        let model = self.model()?;
        let opts = ReductionOptions {
            noise_adjusted: self.session.noise_adjusted,
        };
        let mut resp = match self.session.scenario {
            Scenario::S1 => {
                let x = x.ok_or_else(|| anyhow!("scenario s1 recommendations need the arriving unit's \"x\""))?;
                self.check_x(x)?;
                let test = self.need_test()?;
                let arm = select_scenario1_with(&model, x, test, &self.target_weights(test)?, opts)?;
                json!({ "arm": u8::from(arm) })
            }
            Scenario::S2A => {
                let test = self.need_test()?;
                let pool = self.need_pool()?;
                let p = select_scenario2a_with(&model, pool, test, &self.target_weights(test)?, opts, [None, None])?;
                json!({
                    "unit_index": p.index,
                    "arm": u8::from(p.arm.expect("scenario 2A assigns an arm")),
                    "x": pool.row(p.index),
                    "score": p.score,
                })
            }
            Scenario::S2B => {
                let test = self.need_test()?;
                let pool = self.need_pool()?;
                let e_pool = self.propensity()?.evaluate_rows(pool.candidates())?;
                let w = self.target_weights(test)?;
                let p = select_scenario2b_with(&model, pool, &e_pool, test, &w, opts, [None, None])?;
                json!({ "unit_index": p.index, "x": pool.row(p.index), "score": p.score })
            }
            Scenario::S3 => {
                let pool = self.need_pool()?;
                let e_pool = self.propensity()?.evaluate_rows(pool.candidates())?;
                let ucb = self.ucb()?;
                let p = select_ucb_with(&model, pool, &e_pool, ucb.beta())?;
                json!({ "unit_index": p.index, "x": pool.row(p.index), "score": p.score, "t": ucb.t })
            }
        };
        if let Some(w) = self.warning(&model) {
            resp["warning"] = Value::String(w);
        }
        Ok(resp)
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.session.dim {
            bail!("x has {} coordinates, session dimension is {}", x.len(), self.session.dim);
        }
        if x.iter().any(|v| !v.is_finite()) {
            bail!("x must be finite");
        }
        Ok(())
    }

    /// Records an outcome and refits both surrogates.
    pub fn observe(&mut self, x: Vec<f64>, a: u8, y: f64, unit_index: Option<usize>) -> Result<Value> {
        self.check_x(&x)?;
        let arm = Arm::try_from(a).map_err(|e| anyhow!("{e}"))?;
        if !y.is_finite() {
            bail!("y must be finite");
        }
        if let Some(i) = unit_index {
            let pool = self.pool.as_mut().ok_or_else(|| anyhow!("unit_index given but the session has no pool"))?;
            if !pool.is_available(i) {
                bail!("unit {i} is not an available pool candidate");
            }
            let row = pool.row(i);
            if row.iter().zip(&x).any(|(r, v)| (r - v).abs() > ROW_MATCH_TOL) {
                bail!("x does not match pool row {i}");
            }
            pool.take(i)?;
            self.session.taken.push(i);
        }
        self.session.observations.push(Observation::new(x, arm, y));
        self.session.step += 1;
        self.refit()?;
        let model = self.model()?;
        Ok(json!({
            "ok": true,
            "step": self.session.step,
            "n_obs": [model.n_obs(Arm::Control), model.n_obs(Arm::Treatment)],
        }))
    }

    fn refit(&mut self) -> Result<()> {
        let s = &self.session;
        let cfg = FitConfig::default()
            .with_restarts(s.restarts)
            .with_seed(s.seed.wrapping_add(s.step));
        let warm = match &s.params {
            Some([p0, p1]) => [Some(p0.clone()), Some(p1.clone())],
            None => [None, None],
        };
        let (model, _) = TwoArmModel::fit(s.dim, &s.observations, &cfg, warm)?;
        self.session.params = Some([
            model.params(Arm::Control).clone(),
            model.params(Arm::Treatment).clone(),
        ]);
        Ok(())
    }

    pub fn estimate(&self) -> Result<Value> {
        if self.session.scenario == Scenario::S3 {
            bail!("scenario s3 has no weighted estimand");
        }
        let test = self.need_test()?;
        let model = self.model()?;
        let w = self.target_weights(test)?;
        let mut resp = json!({
            "estimand": self.session.weight.name(),
            "estimate": estimate_qoi(&model, test, &w)?,
            "sd": qoi_posterior_variance(&model, test, &w)?.sqrt(),
        });
        if let Some(warn) = self.warning(&model) {
            resp["warning"] = Value::String(warn);
        }
        Ok(resp)
    }

    fn state(&self) -> Value {
        let s = &self.session;
        let n1 = s.observations.iter().filter(|o| o.arm == Arm::Treatment).count();
        json!({
            "scenario": s.scenario,
            "estimand": s.weight.name(),
            "step": s.step,
            "n_obs": [s.observations.len() - n1, n1],
            "available": self.pool.as_ref().map(|p| p.n_available()),
        })
    }

    /// Handles one request line; returns the response and whether state changed.
    pub fn handle_line(&mut self, line: &str) -> (Value, bool) {
        let req: Request = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => return (json!({ "error": format!("malformed request: {e}") }), false),
        };
        let mut next = self.clone();
        let out = match req {
            Request::Recommend { x } => self.recommend(x.as_deref()).map(|v| (v, false)),
            Request::Observe { x, a, y, unit_index } => next.observe(x, a, y, unit_index).map(|v| (v, true)),
            Request::Estimate => self.estimate().map(|v| (v, false)),
            Request::State => Ok((self.state(), false)),
        };
        match out {
            Ok((v, changed)) => {
                if changed {
                    *self = next;
                }
                (v, changed)
            }
            Err(e) => (json!({ "error": format!("{e:#}") }), false),
        }
    }
}

/// Serves requests from `input` until end of stream, persisting after each change.
pub fn serve<R: BufRead, W: Write>(path: &Path, input: R, mut output: W) -> Result<()> {
    let mut advisor = Advisor::load(path)?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (resp, changed) = advisor.handle_line(&line);
        if changed {
            advisor.save(path)?;
        }
        serde_json::to_writer(&mut output, &resp)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}
