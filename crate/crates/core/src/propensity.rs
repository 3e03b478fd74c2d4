//! Treatment-assignment probabilities `e(x) = P(A = 1 | X = x)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AceError, Result};
use crate::surrogate::Arm;

/// Every propensity is clamped into `[CLAMP, 1 - CLAMP]`.
pub const CLAMP: f64 = 1e-6;

/// Ridge penalty used when the unpenalized fit separates the arms.
pub const SEPARATION_RIDGE: f64 = 1e-4;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(CLAMP, 1.0 - CLAMP)
}

/// Closed-form propensity functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KnownPropensity {
    Constant { p: f64 },
    /// `sigmoid(intercept + slope · Π_k x_k)`
    ProductLogit { intercept: f64, slope: f64 },
}

impl KnownPropensity {
    /// `logit e(x) = -2 + 2 x₁ x₂`, the benchmark assignment mechanism.
    pub fn benchmark() -> Self {
        KnownPropensity::ProductLogit {
            intercept: -2.0,
            slope: 2.0,
        }
    }
}

/// Logistic regression on the coordinates and, optionally, all pairwise products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Coefficients of `x_i x_j` for `i < j`, in lexicographic order.
    #[serde(default)]
    pub interactions: Vec<f64>,
}

impl LogisticFit {
    pub fn dim(&self) -> usize {
        self.coefficients.len()
    }

    fn linear_predictor(&self, x: &[f64]) -> f64 {
        let mut z = self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>();
        if !self.interactions.is_empty() {
            z += pairwise_products(x)
                .zip(&self.interactions)
                .map(|(v, b)| v * b)
                .sum::<f64>();
        }
        z
    }
}

fn pairwise_products(x: &[f64]) -> impl Iterator<Item = f64> + '_ {
    (0..x.len()).flat_map(move |i| ((i + 1)..x.len()).map(move |j| x[i] * x[j]))
}

fn n_pairs(d: usize) -> usize {
    d * d.saturating_sub(1) / 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum PropensityModel {
    Known(KnownPropensity),
    Logistic(LogisticFit),
}

impl PropensityModel {
    pub fn benchmark() -> Self {
        PropensityModel::Known(KnownPropensity::benchmark())
    }

    /// Probability of treatment at `x`, clamped away from 0 and 1.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let p = match self {
            PropensityModel::Known(KnownPropensity::Constant { p }) => *p,
            PropensityModel::Known(KnownPropensity::ProductLogit { intercept, slope }) => {
                sigmoid(intercept + slope * x.iter().product::<f64>())
            }
            PropensityModel::Logistic(fit) => {
                if x.len() != fit.dim() {
                    return Err(AceError::DimensionMismatch {
                        expected: fit.dim(),
                        got: x.len(),
                    });
                }
                sigmoid(fit.linear_predictor(x))
            }
        };
        Ok(clamp(p))
    }

    /// Propensity at every row of `points`.
    pub fn evaluate_rows(&self, points: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(points.nrows());
        let mut buf = vec![0.0; points.ncols()];
        for i in 0..points.nrows() {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = points[(i, k)];
            }
            out[i] = self.evaluate(&buf)?;
        }
        Ok(out)
    }
}

/// Pluggable propensity estimation from observed `(x, arm)` pairs.
pub trait PropensityEstimator {
    fn estimate(&self, xs: &[Vec<f64>], arms: &[Arm]) -> Result<PropensityEstimate>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityEstimate {
    pub model: PropensityModel,
    /// True when the arms were separable and the ridge fallback was used.
    pub penalized: bool,
}

/// Maximum-likelihood logistic regression fitted by Newton's method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LogisticEstimator {
    pub interactions: bool,
}

impl PropensityEstimator for LogisticEstimator {
    fn estimate(&self, xs: &[Vec<f64>], arms: &[Arm]) -> Result<PropensityEstimate> {
        fit_logistic(xs, arms, self.interactions)
    }
}

fn design_matrix(xs: &[Vec<f64>], interactions: bool) -> DMatrix<f64> {
    let d = xs[0].len();
    let p = 1 + d + if interactions { n_pairs(d) } else { 0 };
    DMatrix::from_fn(xs.len(), p, |i, j| {
        let x = &xs[i];
        if j == 0 {
            1.0
        } else if j <= d {
            x[j - 1]
        } else {
            pairwise_products(x).nth(j - 1 - d).expect("pair index in range")
        }
    })
}

/// Log likelihood minus `½ λ ‖β_{1:}‖²`.
fn penalized_loglik(z: &DMatrix<f64>, t: &DVector<f64>, beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = z * beta;
    let ll: f64 = eta
        .iter()
        .zip(t.iter())
        .map(|(e, t)| {
            // log σ(e) = -log(1 + e^{-e})
            let log1p_exp = |v: f64| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() };
            t * -log1p_exp(-e) + (1.0 - t) * -log1p_exp(*e)
        })
        .sum();
    ll - 0.5 * ridge * beta.rows(1, beta.len() - 1).norm_squared()
}

/// Damped Newton iterations; `None` if the iterates do not settle.
fn newton(z: &DMatrix<f64>, t: &DVector<f64>, ridge: f64) -> Option<DVector<f64>> {
    let p = z.ncols();
    let mut beta = DVector::zeros(p);
    let mut ll = penalized_loglik(z, t, &beta, ridge);
    for _ in 0..100 {
        let eta = z * &beta;
        let mu = eta.map(sigmoid);
        let mut grad = z.tr_mul(&(t - &mu));
        let w = mu.map(|m| m * (1.0 - m));
        let mut hess = z.tr_mul(&DMatrix::from_fn(z.nrows(), p, |i, j| z[(i, j)] * w[i]));
        for j in 1..p {
            grad[j] -= ridge * beta[j];
            hess[(j, j)] += ridge;
        }
        let step = hess.clone().cholesky().map(|c| c.solve(&grad)).or_else(|| {
            let mut h = hess;
            for j in 0..p {
                h[(j, j)] += 1e-8;
            }
            h.cholesky().map(|c| c.solve(&grad))
        })?;
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand = &beta + &step * scale;
            let cand_ll = penalized_loglik(z, t, &cand, ridge);
            if cand_ll >= ll - 1e-12 {
                beta = cand;
                ll = cand_ll;
                moved = true;
                break;
            }
            scale *= 0.5;
        }
        if !moved {
            break;
        }
        if beta.amax() > 1e4 {
            return None;
        }
        if (&step * scale).amax() < 1e-10 {
            return Some(beta);
        }
    }
    let eta = z * &beta;
    let grad = z.tr_mul(&(t - eta.map(sigmoid)));
    if grad.amax() < 1e-6 * z.nrows() as f64 {
        Some(beta)
    } else {
        None
    }
}

/// Logistic regression of the arm indicator on `x` (plus pairwise products
/// when `interactions` is set).
///
/// Falls back to a ridge-penalized fit when the arms are perfectly separable.
pub fn fit_logistic(xs: &[Vec<f64>], arms: &[Arm], interactions: bool) -> Result<PropensityEstimate> {
    if xs.len() != arms.len() {
        return Err(AceError::DimensionMismatch {
            expected: xs.len(),
            got: arms.len(),
        });
    }
    let treated = arms.iter().filter(|a| **a == Arm::Treatment).count();
    if treated == 0 || treated == arms.len() {
        return Err(AceError::InvalidArgument(
            "propensity fit needs observations in both arms".into(),
        ));
    }
    let d = xs[0].len();
    if d == 0 || xs.iter().any(|x| x.len() != d) {
        return Err(AceError::InvalidArgument("covariates must share a positive dimension".into()));
    }
    let z = design_matrix(xs, interactions);
    let t = DVector::from_iterator(arms.len(), arms.iter().map(|a| a.indicator()));
    let separated = separable(&z, &t);
    let (beta, penalized) = match (!separated).then(|| newton(&z, &t, 0.0)).flatten() {
        Some(b) => (b, false),
        None => (
            newton(&z, &t, SEPARATION_RIDGE).ok_or_else(|| {
                AceError::NumericalFailure("penalized logistic fit did not converge".into())
            })?,
            true,
        ),
    };
    let fit = LogisticFit {
        intercept: beta[0],
        coefficients: beta.rows(1, d).iter().copied().collect(),
        interactions: if interactions {
            beta.rows(1 + d, n_pairs(d)).iter().copied().collect()
        } else {
            Vec::new()
        },
    };
    Ok(PropensityEstimate {
        model: PropensityModel::Logistic(fit),
        penalized,
    })
}

/// Cheap check for complete separation: a few hundred perceptron passes.
fn separable(z: &DMatrix<f64>, t: &DVector<f64>) -> bool {
    let p = z.ncols();
    let mut w = DVector::<f64>::zeros(p);
    for _ in 0..200 {
        let mut mistakes = 0;
        for i in 0..z.nrows() {
            let s = if t[i] > 0.5 { 1.0 } else { -1.0 };
            let margin: f64 = (0..p).map(|j| z[(i, j)] * w[j]).sum::<f64>() * s;
            if margin <= 0.0 {
                for j in 0..p {
                    w[j] += s * z[(i, j)];
                }
                mistakes += 1;
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn benchmark_function_values() {
        let m = PropensityModel::benchmark();
        assert!((m.evaluate(&[1.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((m.evaluate(&[0.0, 0.0]).unwrap() - 0.119_202_922_022_117_57).abs() < 1e-12);
        assert!((m.evaluate(&[0.0, 0.7]).unwrap() - 0.119_202_922_022_117_57).abs() < 1e-12);
    }

    #[test]
    fn outputs_are_clamped() {
        let m = PropensityModel::Known(KnownPropensity::Constant { p: 1.0 });
        assert_eq!(m.evaluate(&[0.0]).unwrap(), 1.0 - CLAMP);
        let m = PropensityModel::Known(KnownPropensity::ProductLogit {
            intercept: -1e3,
            slope: 0.0,
        });
        assert_eq!(m.evaluate(&[0.0]).unwrap(), CLAMP);
    }

    #[test]
    fn single_arm_input_is_rejected() {
        let xs = vec![vec![0.1], vec![0.2]];
        let arms = vec![Arm::Control, Arm::Control];
        assert!(matches!(fit_logistic(&xs, &arms, false), Err(AceError::InvalidArgument(_))));
    }

    #[test]
    fn balanced_arms_without_signal() {
        let xs: Vec<Vec<f64>> = (0..4)
            .flat_map(|i| [vec![i as f64 / 3.0, 0.2], vec![i as f64 / 3.0, 0.2]])
            .collect();
        let arms: Vec<Arm> = (0..8).map(|i| if i % 2 == 0 { Arm::Control } else { Arm::Treatment }).collect();
        let est = fit_logistic(&xs, &arms, false).unwrap();
        assert!(!est.penalized);
        let PropensityModel::Logistic(fit) = est.model else { panic!() };
        assert!(fit.intercept.abs() < 1e-6);
        assert!(fit.coefficients.iter().all(|c| c.abs() < 1e-6));
    }

    #[test]
    fn score_equation_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = PropensityModel::benchmark();
        let xs: Vec<Vec<f64>> = (0..300).map(|_| vec![rng.random(), rng.random()]).collect();
        let arms: Vec<Arm> = xs
            .iter()
            .map(|x| Arm::from_bool(rng.random::<f64>() < truth.evaluate(x).unwrap()))
            .collect();
        let est = fit_logistic(&xs, &arms, true).unwrap();
        assert!(!est.penalized);
        let mean_fit: f64 =
            xs.iter().map(|x| est.model.evaluate(x).unwrap()).sum::<f64>() / xs.len() as f64;
        let frac = arms.iter().filter(|a| **a == Arm::Treatment).count() as f64 / xs.len() as f64;
        assert!((mean_fit - frac).abs() < 1e-6);
    }

    #[test]
    fn separable_data_uses_ridge() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 9.0]).collect();
        let arms: Vec<Arm> = (0..10).map(|i| Arm::from_bool(i >= 5)).collect();
        let est = fit_logistic(&xs, &arms, false).unwrap();
        assert!(est.penalized);
        let p_lo = est.model.evaluate(&[0.0]).unwrap();
        let p_hi = est.model.evaluate(&[1.0]).unwrap();
        assert!(p_lo < 0.05 && p_hi > 0.95);
    }

    #[test]
    fn logistic_fit_json_field_names() {
        let fit = LogisticFit {
            intercept: -2.0,
            coefficients: vec![0.0, 0.0],
            interactions: vec![2.0],
        };
        let v: serde_json::Value = serde_json::to_value(&fit).unwrap();
        assert_eq!(v["intercept"], -2.0);
        assert_eq!(v["coefficients"][1], 0.0);
        assert_eq!(v["interactions"][0], 2.0);
        let back: LogisticFit = serde_json::from_value(v).unwrap();
        assert_eq!(back, fit);
        let same = PropensityModel::Logistic(back);
        let x = [0.3, 0.8];
        let want = PropensityModel::benchmark().evaluate(&x).unwrap();
        assert!((same.evaluate(&x).unwrap() - want).abs() < 1e-15);
    }
}
