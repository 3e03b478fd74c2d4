//! Marginal likelihood and its maximization over hyperparameters.
//!
//! The optimizer works on log-hyperparameters `(log τ², log ℓ_1..ℓ_d, log η²)`
//! mapped through a logistic squashing onto the box bounds, so the search
//! itself is unconstrained. The constant mean is profiled out in closed form
//! at every evaluation (generalized least squares), which makes it a joint
//! maximizer together with the covariance hyperparameters.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{factor_covariance, kernel_matrix_sym, GpHyperParams, KernelFamily, KernelSpec, TrainingSet};
use crate::error::{AceError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Box bounds on the hyperparameters (natural scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    pub lengthscale: (f64, f64),
    pub signal_variance: (f64, f64),
    pub noise_variance: (f64, f64),
}

impl Default for HyperBounds {
    fn default() -> Self {
        HyperBounds {
            lengthscale: (1e-3, 10.0),
            signal_variance: (1e-6, 1e3),
            noise_variance: (1e-8, 1.0),
        }
    }
}

impl HyperBounds {
    fn log_box(&self, dim: usize) -> Vec<(f64, f64)> {
        let ln = |(a, b): (f64, f64)| (a.ln(), b.ln());
        let mut v = Vec::with_capacity(dim + 2);
        v.push(ln(self.signal_variance));
        v.extend(std::iter::repeat_n(ln(self.lengthscale), dim));
        v.push(ln(self.noise_variance));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of optimizer starts, the warm start (if any) included.
    pub restarts: usize,
    pub bounds: HyperBounds,
    pub seed: u64,
    pub max_iter: usize,
    #[serde(default)]
    pub warm_start: Option<GpHyperParams>,
    /// Returned as-is when there are fewer than three points or every start fails.
    #[serde(default)]
    pub defaults: Option<GpHyperParams>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 10,
            bounds: HyperBounds::default(),
            seed: 0,
            max_iter: 100,
            warm_start: None,
            defaults: None,
        }
    }
}

impl FitConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_warm_start(mut self, warm: Option<GpHyperParams>) -> Self {
        self.warm_start = warm;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    fn defaults_for(&self, dim: usize) -> GpHyperParams {
        self.defaults
            .clone()
            .filter(|d| d.dim() == dim)
            .unwrap_or_else(|| GpHyperParams::default_for(dim))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: GpHyperParams,
    /// Log marginal likelihood at `params`; `None` when defaults were returned.
    pub log_likelihood: Option<f64>,
    /// Profiled log likelihood at each start point that could be evaluated.
    pub start_log_likelihoods: Vec<f64>,
    pub failed_starts: usize,
    /// True when every start failed and the defaults were returned.
    pub fell_back: bool,
}

impl FitReport {
    pub fn optimized(&self) -> bool {
        self.log_likelihood.is_some()
    }
}

/// Gaussian log density of the outputs under the GP prior with the given hyperparameters.
pub fn log_marginal_likelihood(params: &GpHyperParams, data: &TrainingSet) -> Result<f64> {
    Ok(log_marginal_likelihood_grad(params, data)?.0)
}

/// Log marginal likelihood and its gradient with respect to
/// `(log τ², log ℓ_1, …, log ℓ_d, log η²)` at fixed constant mean.
pub fn log_marginal_likelihood_grad(
    params: &GpHyperParams,
    data: &TrainingSet,
) -> Result<(f64, Vec<f64>)> {
    params.validate()?;
    if data.is_empty() {
        return Err(AceError::InvalidArgument(
            "log likelihood needs at least one observation".into(),
        ));
    }
    if data.dim() != params.dim() {
        return Err(AceError::DimensionMismatch {
            expected: params.dim(),
            got: data.dim(),
        });
    }
    let eval = Evaluation::new(params, data, Some(params.constant_mean))?;
    Ok((eval.log_likelihood, eval.gradient()))
}

/// One factorization of the training covariance with everything the
/// likelihood and its gradient need.
struct Evaluation<'a> {
    params: &'a GpHyperParams,
    data: &'a TrainingSet,
    k_signal: DMatrix<f64>,
    k_inv: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
    mean: f64,
    log_likelihood: f64,
}

impl<'a> Evaluation<'a> {
    /// `mean = None` profiles the constant mean by generalized least squares.
    fn new(params: &'a GpHyperParams, data: &'a TrainingSet, mean: Option<f64>) -> Result<Self> {
        let n = data.len();
        let k_signal = kernel_matrix_sym(&params.kernel, data.inputs())?;
        let (ch, jitter) = factor_covariance(
            k_signal.clone(),
            params.noise_variance,
            params.kernel.signal_variance,
        )?;
        let y = data.outputs();
        let mean = match mean {
            Some(m) => m,
            None => {
                let ones = DVector::from_element(n, 1.0);
                let kinv_one = ch.solve(&ones);
                let denom = kinv_one.sum();
                if !(denom > 0.0 && denom.is_finite()) {
                    return Err(AceError::NumericalFailure("degenerate mean estimate".into()));
                }
                kinv_one.dot(y) / denom
            }
        };
        let resid = y.add_scalar(-mean);
        let alpha = ch.solve(&resid);
        let log_det: f64 = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_likelihood = -0.5 * resid.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * LN_2PI;
        if !log_likelihood.is_finite() {
            return Err(AceError::NumericalFailure("non-finite log likelihood".into()));
        }
        let k_inv = ch.inverse();
        Ok(Evaluation {
            params,
            data,
            k_signal,
            k_inv,
            alpha,
            jitter,
            mean,
            log_likelihood,
        })
    }

    /// `½ tr((ααᵀ - K⁻¹) ∂K/∂θ_j)` for each log-hyperparameter.
    fn gradient(&self) -> Vec<f64> {
        let n = self.data.len();
        let d = self.params.dim();
        let x = self.data.inputs();
        let inv_l2: Vec<f64> = self
            .params
            .kernel
            .lengthscales
            .iter()
            .map(|l| 1.0 / (l * l))
            .collect();
        let mut g_signal = 0.0;
        let mut g_ls = vec![0.0; d];
        let mut trace_w = 0.0;
        for j in 0..n {
            let wjj = self.alpha[j] * self.alpha[j] - self.k_inv[(j, j)];
            trace_w += wjj;
            g_signal += wjj * self.k_signal[(j, j)];
            for i in (j + 1)..n {
                let w = 2.0 * (self.alpha[i] * self.alpha[j] - self.k_inv[(i, j)]);
                let kf = self.k_signal[(i, j)];
                g_signal += w * kf;
                for (k, g) in g_ls.iter_mut().enumerate() {
                    let diff = x[(i, k)] - x[(j, k)];
                    *g += w * kf * diff * diff * inv_l2[k];
                }
            }
        }
        let mut grad = Vec::with_capacity(d + 2);
        grad.push(0.5 * (g_signal + self.jitter * trace_w));
        grad.extend(g_ls.iter().map(|g| 0.5 * g));
        grad.push(0.5 * self.params.noise_variance * trace_w);
        grad
    }
}

fn params_from_log(theta: &[f64], mean: f64) -> GpHyperParams {
    let d = theta.len() - 2;
    GpHyperParams {
        kernel: KernelSpec {
            family: KernelFamily::SquaredExponential,
            signal_variance: theta[0].exp(),
            lengthscales: theta[1..=d].iter().map(|t| t.exp()).collect(),
        },
        noise_variance: theta[d + 1].exp(),
        constant_mean: mean,
    }
}

fn log_from_params(p: &GpHyperParams) -> Vec<f64> {
    let mut v = Vec::with_capacity(p.dim() + 2);
    v.push(p.kernel.signal_variance.ln());
    v.extend(p.kernel.lengthscales.iter().map(|l| l.ln()));
    v.push(p.noise_variance.max(f64::MIN_POSITIVE).ln());
    v
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Unconstrained coordinates `z` ↔ log-hyperparameters inside the box.
struct BoxMap {
    bounds: Vec<(f64, f64)>,
}

impl BoxMap {
    fn to_theta(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.bounds)
            .map(|(z, (lo, hi))| lo + (hi - lo) * sigmoid(*z))
            .collect()
    }

    fn dtheta_dz(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.bounds)
            .map(|(z, (lo, hi))| {
                let s = sigmoid(*z);
                (hi - lo) * s * (1.0 - s)
            })
            .collect()
    }

    fn to_z(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.bounds)
            .map(|(t, (lo, hi))| {
                let u = ((t - lo) / (hi - lo)).clamp(1e-6, 1.0 - 1e-6);
                (u / (1.0 - u)).ln()
            })
            .collect()
    }
}

/// Minimizes `f` with BFGS and a backtracking line search; `f` returns
/// value and gradient or `None` where it cannot be evaluated.
fn bfgs<F>(mut f: F, z0: Vec<f64>, f0: f64, g0: Vec<f64>, max_iter: usize) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    const MAX_STEP: f64 = 2.0;
    let n = z0.len();
    let mut z = z0;
    let mut fz = f0;
    let mut g = g0;
    let mut h = DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iter {
        if g.iter().all(|v| v.abs() < 1e-7) {
            break;
        }
        let gv = DVector::from_column_slice(&g);
        let mut dir = -(&h * &gv);
        let mut slope = dir.dot(&gv);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            dir = -gv.clone();
            slope = dir.dot(&gv);
        }
        let biggest = dir.amax();
        if biggest > MAX_STEP {
            dir *= MAX_STEP / biggest;
            slope = dir.dot(&gv);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = z.iter().zip(dir.iter()).map(|(a, b)| a + step * b).collect();
            if let Some((ft, gt)) = f(&trial) {
                if ft <= fz + 1e-4 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((zn, fnew, gn)) = accepted else { break };
        let s = DVector::from_iterator(n, zn.iter().zip(&z).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        let improvement = fz - fnew;
        z = zn;
        fz = fnew;
        g = gn;
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h = &h - (&hy * s.transpose() + &s * hy.transpose()) * rho
                + (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        if improvement.abs() <= 1e-11 * (1.0 + fz.abs()) {
            break;
        }
    }
    (z, fz)
}

fn start_points(data: &TrainingSet, cfg: &FitConfig, log_box: &[(f64, f64)]) -> Vec<Vec<f64>> {
    let d = data.dim();
    let y = data.outputs();
    let n = y.len() as f64;
    let mean = y.mean();
    let var_y = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(1e-6);
    let spans: Vec<f64> = (0..d)
        .map(|k| {
            let col = data.inputs().column(k);
            let span = col.max() - col.min();
            if span > 0.0 {
                span
            } else {
                1.0
            }
        })
        .collect();
    let clamp = |t: &mut Vec<f64>| {
        for (v, (lo, hi)) in t.iter_mut().zip(log_box) {
            *v = v.clamp(*lo, *hi);
        }
    };
    let mut starts = Vec::with_capacity(cfg.restarts.max(1));
    match &cfg.warm_start {
        Some(w) if w.dim() == d => starts.push(log_from_params(w)),
        _ => {
            let mut t = vec![var_y.ln()];
            t.extend(spans.iter().map(|s| (0.25 * s).ln()));
            t.push((1e-2 * var_y).ln());
            starts.push(t);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    while starts.len() < cfg.restarts.max(1) {
        let mut t = vec![var_y.ln() + rng.random_range(0.1f64.ln()..10f64.ln())];
        t.extend(spans.iter().map(|s| s.ln() + rng.random_range(0.05f64.ln()..2f64.ln())));
        t.push(var_y.ln() + rng.random_range(1e-6f64.ln()..1e-1f64.ln()));
        starts.push(t);
    }
    for t in &mut starts {
        clamp(t);
    }
    starts
}

/// Maximum-likelihood hyperparameters by multi-start quasi-Newton search.
///
/// With fewer than three observations the configured defaults are returned
/// without optimizing. If every start fails numerically the defaults are
/// returned with `fell_back` set.
pub fn fit_mle(data: &TrainingSet, cfg: &FitConfig) -> Result<FitReport> {
    let d = data.dim();
    let defaults = cfg.defaults_for(d);
    if data.len() < 3 {
        return Ok(FitReport {
            params: defaults,
            log_likelihood: None,
            start_log_likelihoods: Vec::new(),
            failed_starts: 0,
            fell_back: false,
        });
    }
    let log_box = cfg.bounds.log_box(d);
    let map = BoxMap { bounds: log_box.clone() };
    let objective = |z: &[f64]| -> Option<(f64, Vec<f64>, f64)> {
        let theta = map.to_theta(z);
        let p = params_from_log(&theta, 0.0);
        let eval = Evaluation::new(&p, data, None).ok()?;
        let grad_theta = eval.gradient();
        let jac = map.dtheta_dz(z);
        let grad_z: Vec<f64> = grad_theta.iter().zip(&jac).map(|(g, j)| -g * j).collect();
        if grad_z.iter().any(|g| !g.is_finite()) {
            return None;
        }
        Some((-eval.log_likelihood, grad_z, eval.mean))
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut start_lls = Vec::new();
    let mut failed = 0;
    for theta0 in start_points(data, cfg, &log_box) {
        let z0 = map.to_z(&theta0);
        let Some((f0, g0, _)) = objective(&z0) else {
            failed += 1;
            continue;
        };
        start_lls.push(-f0);
        let (z, fz) = bfgs(|z| objective(z).map(|(f, g, _)| (f, g)), z0, f0, g0, cfg.max_iter);
        if best.as_ref().is_none_or(|(bf, _)| fz < *bf) {
            best = Some((fz, z));
        }
    }
    match best {
        Some((_, z)) => {
            let (f, _, mean) = objective(&z).expect("best point was evaluated");
            let params = params_from_log(&map.to_theta(&z), mean);
            Ok(FitReport {
                params,
                log_likelihood: Some(-f),
                start_log_likelihoods: start_lls,
                failed_starts: failed,
                fell_back: false,
            })
        }
        None => Ok(FitReport {
            params: defaults,
            log_likelihood: None,
            start_log_likelihoods: start_lls,
            failed_starts: failed,
            fell_back: true,
        }),
    }
}
