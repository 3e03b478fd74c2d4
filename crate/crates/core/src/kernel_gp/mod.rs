//! Gaussian-process regression for a single response surface.
//!
//! A [`FittedGp`] is an immutable snapshot of hyperparameters, training data
//! and the Cholesky factor of the training covariance. Appending data returns
//! a new snapshot, so snapshots can be shared freely across threads.

mod kernel;
mod mle;

pub use kernel::{kernel_matrix, kernel_matrix_sym, KernelFamily, KernelSpec};
pub use mle::{
    fit_mle, log_marginal_likelihood, log_marginal_likelihood_grad, FitConfig, FitReport,
    HyperBounds,
};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{AceError, Result};

/// Relative jitter added to the diagonal of every training covariance.
pub const JITTER_START: f64 = 1e-10;
/// Largest relative jitter tried before giving up on a factorization.
pub const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperParams {
    pub kernel: KernelSpec,
    pub noise_variance: f64,
    pub constant_mean: f64,
}

impl GpHyperParams {
    pub fn new(kernel: KernelSpec, noise_variance: f64, constant_mean: f64) -> Result<Self> {
        let p = GpHyperParams {
            kernel,
            noise_variance,
            constant_mean,
        };
        p.validate()?;
        Ok(p)
    }

    /// Hyperparameters used before there is enough data to fit.
    pub fn default_for(dim: usize) -> Self {
        GpHyperParams {
            kernel: KernelSpec {
                family: KernelFamily::SquaredExponential,
                signal_variance: 1.0,
                lengthscales: vec![0.25; dim.max(1)],
            },
            noise_variance: 1e-6,
            constant_mean: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(AceError::InvalidArgument(format!(
                "noise variance must be nonnegative, got {}",
                self.noise_variance
            )));
        }
        if !self.constant_mean.is_finite() {
            return Err(AceError::InvalidArgument("constant mean must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }
}

/// Inputs (one row per point) and their observed outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    inputs: DMatrix<f64>,
    outputs: DVector<f64>,
}

impl TrainingSet {
    pub fn new(inputs: DMatrix<f64>, outputs: DVector<f64>) -> Result<Self> {
        if inputs.ncols() == 0 {
            return Err(AceError::InvalidArgument("inputs need at least one column".into()));
        }
        if inputs.nrows() != outputs.len() {
            return Err(AceError::DimensionMismatch {
                expected: inputs.nrows(),
                got: outputs.len(),
            });
        }
        Ok(TrainingSet { inputs, outputs })
    }

    pub fn empty(dim: usize) -> Self {
        TrainingSet {
            inputs: DMatrix::zeros(0, dim.max(1)),
            outputs: DVector::zeros(0),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], outputs: &[f64]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(AceError::InvalidArgument("ragged input rows".into()));
        }
        let inputs = DMatrix::from_fn(rows.len(), dim, |i, k| rows[i][k]);
        Self::new(inputs, DVector::from_column_slice(outputs))
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DVector<f64> {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// A copy with one more point appended.
    pub fn with_point(&self, x: &[f64], y: f64) -> Result<Self> {
        if x.len() != self.dim() {
            return Err(AceError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let n = self.len();
        let inputs = self.inputs.clone().insert_row(n, 0.0);
        let mut inputs = inputs;
        for (k, v) in x.iter().enumerate() {
            inputs[(n, k)] = *v;
        }
        let outputs = self.outputs.clone().insert_row(n, y);
        Ok(TrainingSet { inputs, outputs })
    }
}

/// Posterior mean and covariance of the latent surface at query points.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl PosteriorSummary {
    pub fn variances(&self) -> DVector<f64> {
        self.covariance.diagonal()
    }
}

/// Factorizes `Σ₀(X, X) + η² I` with escalating diagonal jitter.
///
/// Returns the Cholesky factorization and the absolute jitter that was used.
pub(crate) fn factor_training(
    params: &GpHyperParams,
    inputs: &DMatrix<f64>,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let k = kernel_matrix_sym(&params.kernel, inputs)?;
    factor_covariance(k, params.noise_variance, params.kernel.signal_variance)
}

pub(crate) fn factor_covariance(
    k: DMatrix<f64>,
    noise_variance: f64,
    signal_variance: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let mut rel = JITTER_START;
    loop {
        let jitter = rel * signal_variance;
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += noise_variance + jitter;
        }
        if let Some(ch) = Cholesky::new(m) {
            return Ok((ch, jitter));
        }
        rel *= 10.0;
        if rel > JITTER_MAX * 1.000_001 {
            return Err(AceError::NumericalFailure(format!(
                "covariance of {n} points is not positive definite after jitter {:.1e}",
                JITTER_MAX * signal_variance
            )));
        }
    }
}

/// Refinement sweeps that remove the jitter from the mean weights.
const REFINE_STEPS: usize = 3;

/// `(Σ₀(X,X) + η² I)⁻¹ (y - m₀)` using the jittered factor `chol` as a preconditioner.
///
/// Without refinement a noiseless fit misses its data by `jitter · α`. Each sweep
/// contracts the error by `jitter / (λ_min + jitter) < 1` and is kept only if the
/// residual shrinks.
fn refined_weights(
    params: &GpHyperParams,
    data: &TrainingSet,
    chol: &DMatrix<f64>,
    jitter: f64,
) -> Result<DVector<f64>> {
    let solve = |b: &DVector<f64>| {
        let z = chol.solve_lower_triangular(b).expect("nonzero diagonal");
        chol.tr_solve_lower_triangular(&z).expect("nonzero diagonal")
    };
    let resid = data.outputs().add_scalar(-params.constant_mean);
    let mut alpha = solve(&resid);
    if jitter == 0.0 {
        return Ok(alpha);
    }
    let mut k = kernel_matrix_sym(&params.kernel, data.inputs())?;
    for i in 0..k.nrows() {
        k[(i, i)] += params.noise_variance;
    }
    let mut r = &resid - &k * &alpha;
    for _ in 0..REFINE_STEPS {
        let next = &alpha + solve(&r);
        let r_next = &resid - &k * &next;
        if r_next.norm() >= r.norm() {
            break;
        }
        alpha = next;
        r = r_next;
    }
    Ok(alpha)
}

/// Immutable GP posterior snapshot: hyperparameters, data and factored covariance.
#[derive(Debug, Clone)]
pub struct FittedGp {
    params: GpHyperParams,
    data: TrainingSet,
    /// Lower Cholesky factor of `Σ₀(X,X) + (η² + jitter) I`.
    chol: DMatrix<f64>,
    /// `(Σ₀(X,X) + η² I)⁻¹ (y - m₀)` without the jitter, see [`refined_weights`].
    alpha: DVector<f64>,
    jitter: f64,
}

impl FittedGp {
    pub fn new(params: GpHyperParams, data: TrainingSet) -> Result<Self> {
        params.validate()?;
        if data.dim() != params.dim() {
            return Err(AceError::DimensionMismatch {
                expected: params.dim(),
                got: data.dim(),
            });
        }
        if data.is_empty() {
            return Ok(FittedGp {
                jitter: JITTER_START * params.kernel.signal_variance,
                params,
                data,
                chol: DMatrix::zeros(0, 0),
                alpha: DVector::zeros(0),
            });
        }
        let (ch, jitter) = factor_training(&params, data.inputs())?;
        let chol = ch.unpack();
        let alpha = refined_weights(&params, &data, &chol, jitter)?;
        Ok(FittedGp {
            params,
            data,
            chol,
            alpha,
            jitter,
        })
    }

    /// Prior-only snapshot with no training data.
    pub fn prior(params: GpHyperParams) -> Result<Self> {
        let dim = params.dim();
        Self::new(params, TrainingSet::empty(dim))
    }

    pub fn params(&self) -> &GpHyperParams {
        &self.params
    }

    pub fn data(&self) -> &TrainingSet {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Same hyperparameters, new data.
    pub fn with_data(&self, data: TrainingSet) -> Result<Self> {
        Self::new(self.params.clone(), data)
    }

    /// Conditions on one more observation by extending the Cholesky factor.
    pub fn append(&self, x: &[f64], y: f64) -> Result<Self> {
        let data = self.data.with_point(x, y)?;
        let n = self.len();
        let k = self.params.kernel.cross_vector(self.data.inputs(), x)?;
        let l_row = self.solve_lower(&k);
        let pivot = self.params.kernel.signal_variance + self.params.noise_variance + self.jitter
            - l_row.norm_squared();
        if !(pivot > 0.0 && pivot.is_finite()) || pivot < 1e-12 * self.params.kernel.signal_variance
        {
            return Self::new(self.params.clone(), data);
        }
        let mut chol = self.chol.clone().insert_row(n, 0.0).insert_column(n, 0.0);
        for j in 0..n {
            chol[(n, j)] = l_row[j];
        }
        chol[(n, n)] = pivot.sqrt();
        let alpha = refined_weights(&self.params, &data, &chol, self.jitter)?;
        Ok(FittedGp {
            params: self.params.clone(),
            data,
            chol,
            alpha,
            jitter: self.jitter,
        })
    }

    /// `L⁻¹ b` for the training Cholesky factor `L`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        if self.is_empty() {
            return DVector::zeros(0);
        }
        self.chol
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `L⁻¹ B` column by column.
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        if self.is_empty() {
            return DMatrix::zeros(0, b.ncols());
        }
        self.chol
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn kernel_vector(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.params.kernel.cross_vector(self.data.inputs(), x)
    }

    pub fn prior_variance(&self) -> f64 {
        self.params.kernel.signal_variance
    }

    /// Posterior mean and variance at a single point.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let k = self.kernel_vector(x)?;
        let mean = self.params.constant_mean + k.dot(&self.alpha);
        let v = self.solve_lower(&k);
        let var = (self.prior_variance() - v.norm_squared()).max(0.0);
        Ok((mean, var))
    }

    /// Posterior means and variances at every row of `xq`.
    pub fn predict_rows(&self, xq: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let kq = kernel_matrix(&self.params.kernel, self.data.inputs(), xq)?;
        let mean = kq.tr_mul(&self.alpha).add_scalar(self.params.constant_mean);
        let v = self.solve_lower_mat(&kq);
        let tau2 = self.prior_variance();
        let var = DVector::from_fn(xq.nrows(), |j, _| {
            (tau2 - v.column(j).norm_squared()).max(0.0)
        });
        Ok((mean, var))
    }

    /// Posterior means at every row of `xq`.
    pub fn mean_at(&self, xq: &DMatrix<f64>) -> Result<DVector<f64>> {
        let kq = kernel_matrix(&self.params.kernel, self.data.inputs(), xq)?;
        Ok(kq.tr_mul(&self.alpha).add_scalar(self.params.constant_mean))
    }

    pub fn posterior_at(&self, xq: &DMatrix<f64>) -> Result<PosteriorSummary> {
        if xq.nrows() == 0 {
            return Err(AceError::InvalidArgument("no query points".into()));
        }
        let kq = kernel_matrix(&self.params.kernel, self.data.inputs(), xq)?;
        let mean = kq.tr_mul(&self.alpha).add_scalar(self.params.constant_mean);
        let v = self.solve_lower_mat(&kq);
        let mut cov = kernel_matrix_sym(&self.params.kernel, xq)? - v.tr_mul(&v);
        for i in 0..cov.nrows() {
            if cov[(i, i)] < 0.0 {
                cov[(i, i)] = 0.0;
            }
        }
        Ok(PosteriorSummary {
            mean,
            covariance: cov,
        })
    }

    /// Off-diagonal block `Σ_n(Xa, xb)` of the joint posterior covariance.
    pub fn cross_cov(&self, xa: &DMatrix<f64>, xb: &[f64]) -> Result<DVector<f64>> {
        let prior = self.params.kernel.cross_vector(xa, xb)?;
        if self.is_empty() {
            return Ok(prior);
        }
        let ka = kernel_matrix(&self.params.kernel, self.data.inputs(), xa)?;
        let va = self.solve_lower_mat(&ka);
        let vb = self.solve_lower(&self.kernel_vector(xb)?);
        Ok(prior - va.tr_mul(&vb))
    }
}

/// Posterior mean and covariance at `xq` given hyperparameters and data.
pub fn posterior_at(
    params: &GpHyperParams,
    data: &TrainingSet,
    xq: &DMatrix<f64>,
) -> Result<PosteriorSummary> {
    FittedGp::new(params.clone(), data.clone())?.posterior_at(xq)
}

/// Posterior covariance between each row of `xa` and the point `xb`.
pub fn posterior_cross_cov(
    params: &GpHyperParams,
    data: &TrainingSet,
    xa: &DMatrix<f64>,
    xb: &[f64],
) -> Result<DVector<f64>> {
    FittedGp::new(params.clone(), data.clone())?.cross_cov(xa, xb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(tau2: f64, ls: &[f64], eta2: f64, m0: f64) -> GpHyperParams {
        GpHyperParams::new(
            KernelSpec::squared_exponential(tau2, ls.to_vec()).unwrap(),
            eta2,
            m0,
        )
        .unwrap()
    }

    #[test]
    fn empty_data_gives_prior() {
        let p = params(1.7, &[0.3, 0.5], 0.01, 0.4);
        let xq = DMatrix::from_row_slice(3, 2, &[0.1, 0.1, 0.5, 0.2, 0.9, 0.9]);
        let post = posterior_at(&p, &TrainingSet::empty(2), &xq).unwrap();
        let prior = kernel_matrix(&p.kernel, &xq, &xq).unwrap();
        assert!((post.covariance - prior).amax() < 1e-15);
        assert!(post.mean.iter().all(|m| (m - 0.4).abs() < 1e-15));
    }

    #[test]
    fn noiseless_interpolation() {
        let p = params(1.0, &[0.3, 0.3], 0.0, 0.0);
        let data =
            TrainingSet::from_rows(&[vec![0.1, 0.2], vec![0.6, 0.4], vec![0.3, 0.9]], &[1.0, -0.5, 0.25])
                .unwrap();
        let post = posterior_at(&p, &data, data.inputs()).unwrap();
        for i in 0..3 {
            assert!((post.mean[i] - data.outputs()[i]).abs() < 1e-8);
            assert!(post.covariance[(i, i)] <= 1e-6);
        }
    }

    #[test]
    fn cross_cov_of_prior_is_self_covariance() {
        let p = params(2.5, &[0.2, 0.2], 0.0, 0.0);
        let xb = [0.4, 0.6];
        let xa = DMatrix::from_row_slice(1, 2, &xb);
        let c = posterior_cross_cov(&p, &TrainingSet::empty(2), &xa, &xb).unwrap();
        assert!((c[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn cross_cov_decays_far_away() {
        let p = params(1.0, &[0.05, 0.05], 0.01, 0.0);
        let data = TrainingSet::from_rows(&[vec![0.1, 0.1], vec![0.2, 0.3]], &[0.0, 1.0]).unwrap();
        let xa = DMatrix::from_row_slice(2, 2, &[0.1, 0.15, 0.25, 0.3]);
        let c = posterior_cross_cov(&p, &data, &xa, &[5.0, 5.0]).unwrap();
        assert!(c.amax() < 1e-6);
    }

    #[test]
    fn duplicated_points_factor_with_jitter() {
        let p = params(1.0, &[0.3], 0.0, 0.0);
        let data = TrainingSet::from_rows(&[vec![0.5], vec![0.5], vec![0.5]], &[1.0, 1.0, 1.0]).unwrap();
        let gp = FittedGp::new(p, data).unwrap();
        let (m, v) = gp.predict(&[0.5]).unwrap();
        assert!((m - 1.0).abs() < 1e-6);
        assert!(v < 1e-6);
    }

    #[test]
    fn dimension_checks() {
        let p = params(1.0, &[0.3, 0.3], 0.0, 0.0);
        let data = TrainingSet::from_rows(&[vec![0.5]], &[1.0]).unwrap();
        assert!(FittedGp::new(p.clone(), data).is_err());
        let gp = FittedGp::prior(p).unwrap();
        assert!(gp.predict(&[0.1]).is_err());
        assert!(gp.posterior_at(&DMatrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn training_set_shape_mismatch() {
        let r = TrainingSet::new(DMatrix::zeros(3, 2), DVector::zeros(2));
        assert!(matches!(r, Err(AceError::DimensionMismatch { .. })));
    }
}
