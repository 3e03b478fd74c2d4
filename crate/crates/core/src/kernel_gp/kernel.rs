use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{AceError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `τ² exp(-Σ_k (x_k - x'_k)² / (2 ℓ_k²))`
    #[default]
    SquaredExponential,
}

/// Stationary covariance kernel with one lengthscale per input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(default)]
    pub family: KernelFamily,
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
}

impl KernelSpec {
    pub fn squared_exponential(signal_variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let spec = KernelSpec {
            family: KernelFamily::SquaredExponential,
            signal_variance,
            lengthscales,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(AceError::InvalidArgument(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        if self.lengthscales.is_empty() {
            return Err(AceError::InvalidArgument(
                "kernel needs at least one lengthscale".into(),
            ));
        }
        if let Some(l) = self
            .lengthscales
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(AceError::InvalidArgument(format!(
                "lengthscales must be positive, got {l}"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Kernel value between two points given as coordinate iterators.
    #[inline]
    pub fn eval_iter(
        &self,
        a: impl Iterator<Item = f64>,
        b: impl Iterator<Item = f64>,
    ) -> f64 {
        let mut s = 0.0;
        for ((ai, bi), l) in a.zip(b).zip(&self.lengthscales) {
            let z = (ai - bi) / l;
            s += z * z;
        }
        self.signal_variance * (-0.5 * s).exp()
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.eval_iter(a.iter().copied(), b.iter().copied())
    }

    /// Kernel value between row `i` of `xa` and the point `b`.
    #[inline]
    pub fn eval_row(&self, xa: &DMatrix<f64>, i: usize, b: &[f64]) -> f64 {
        self.eval_iter(xa.row(i).iter().copied(), b.iter().copied())
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(AceError::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    /// Kernel vector `k(X, b)` with one entry per row of `x`.
    pub fn cross_vector(&self, x: &DMatrix<f64>, b: &[f64]) -> Result<nalgebra::DVector<f64>> {
        self.check_dim(b.len())?;
        if x.nrows() > 0 {
            self.check_dim(x.ncols())?;
        }
        Ok(nalgebra::DVector::from_fn(x.nrows(), |i, _| {
            self.eval_row(x, i, b)
        }))
    }
}

/// Covariance matrix between the rows of `x` and the rows of `x2`.
pub fn kernel_matrix(spec: &KernelSpec, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() > 0 {
        spec.check_dim(x.ncols())?;
    }
    if x2.nrows() > 0 {
        spec.check_dim(x2.ncols())?;
    }
    let (n, m) = (x.nrows(), x2.nrows());
    let d = spec.dim();
    // Row-major copies keep the inner loop contiguous.
    let a: Vec<f64> = (0..n).flat_map(|i| x.row(i).iter().copied().collect::<Vec<_>>()).collect();
    let b: Vec<f64> = (0..m).flat_map(|j| x2.row(j).iter().copied().collect::<Vec<_>>()).collect();
    let mut k = DMatrix::zeros(n, m);
    for j in 0..m {
        let bj = &b[j * d..(j + 1) * d];
        for i in 0..n {
            k[(i, j)] = spec.eval(&a[i * d..(i + 1) * d], bj);
        }
    }
    Ok(k)
}

/// Symmetric covariance matrix of a single point set.
pub fn kernel_matrix_sym(spec: &KernelSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() > 0 {
        spec.check_dim(x.ncols())?;
    }
    let n = x.nrows();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = spec.signal_variance;
        for i in (j + 1)..n {
            let v = spec.eval_iter(x.row(i).iter().copied(), x.row(j).iter().copied());
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}
