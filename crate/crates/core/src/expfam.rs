//! Natural-parameter algebra for multivariate Gaussians.
//!
//! A Gaussian `N(mu, Sigma)` is carried as `(eta1, eta2) = (Sigma^-1 mu, -1/2 Sigma^-1)`.
//! Backward kernels are formed by adding natural parameters, so this is the
//! representation every variational density in the crate goes through.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Natural parameters of a multivariate Gaussian.
///
/// `eta2` is stored dense and symmetrized on construction. The Cholesky factor of
/// the precision `-2 eta2` is computed on first use and cached.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianNatural {
    eta1: DVector<f64>,
    eta2: DMatrix<f64>,
    #[serde(skip)]
    precision_chol: OnceLock<Option<Cholesky<f64, Dyn>>>,
}

/// Moment form `(mean, cov)` of a Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sufficient statistic `T(x) = (x, x x^T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SufficientStat {
    pub t1: DVector<f64>,
    pub t2: DMatrix<f64>,
}

/// Returns `(M + M^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `T(x) = (x, x x^T)`.
pub fn suff_stat(x: &DVector<f64>) -> SufficientStat {
    SufficientStat {
        t1: x.clone(),
        t2: x * x.transpose(),
    }
}

/// Number of flat natural-parameter coordinates for dimension `d` (dense `eta2`).
pub const fn flat_len(d: usize) -> usize {
    d + d * d
}

/// Writes `T(x)` into `out` using the flat layout of [`GaussianNatural::to_flat`].
pub fn suff_stat_flat_into(x: &[f64], out: &mut [f64]) {
    let d = x.len();
    out[..d].copy_from_slice(x);
    for c in 0..d {
        for r in 0..d {
            out[d + c * d + r] = x[r] * x[c];
        }
    }
}

impl GaussianNatural {
    /// Builds natural parameters, symmetrizing `eta2`. Definiteness is not checked
    /// here so that intermediate sums can be represented.
    pub fn new(eta1: DVector<f64>, eta2: DMatrix<f64>) -> Result<Self> {
        let d = eta1.len();
        check_dim(d, eta2.nrows())?;
        check_dim(d, eta2.ncols())?;
        Ok(Self::from_parts_unchecked(eta1, symmetrize(&eta2)))
    }

    pub(crate) fn from_parts_unchecked(eta1: DVector<f64>, eta2: DMatrix<f64>) -> Self {
        Self {
            eta1,
            eta2,
            precision_chol: OnceLock::new(),
        }
    }

    /// The all-zero natural parameter (additive identity, not a valid density).
    pub fn zeros(d: usize) -> Self {
        Self::from_parts_unchecked(DVector::zeros(d), DMatrix::zeros(d, d))
    }

    pub fn standard(d: usize) -> Self {
        Self::from_parts_unchecked(DVector::zeros(d), DMatrix::identity(d, d) * -0.5)
    }

    pub fn from_moments(m: &GaussianMoments) -> Result<Self> {
        let d = m.mean.len();
        check_dim(d, m.cov.nrows())?;
        let chol = Cholesky::new(symmetrize(&m.cov)).ok_or(Error::NotSpd("covariance"))?;
        let prec = symmetrize(&chol.inverse());
        let eta1 = &prec * &m.mean;
        Ok(Self::from_parts_unchecked(eta1, prec * -0.5))
    }

    /// Reads the flat layout `[eta1; vec(eta2)]` (column-major `eta2`).
    pub fn from_flat(d: usize, flat: &[f64]) -> Result<Self> {
        check_dim(flat_len(d), flat.len())?;
        let eta1 = DVector::from_column_slice(&flat[..d]);
        let eta2 = DMatrix::from_column_slice(d, d, &flat[d..]);
        Self::new(eta1, eta2)
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let d = self.dim();
        let mut out = DVector::zeros(flat_len(d));
        out.rows_mut(0, d).copy_from(&self.eta1);
        out.rows_mut(d, d * d)
            .copy_from_slice(self.eta2.as_slice());
        out
    }

    pub fn dim(&self) -> usize {
        self.eta1.len()
    }

    pub fn eta1(&self) -> &DVector<f64> {
        &self.eta1
    }

    pub fn eta2(&self) -> &DMatrix<f64> {
        &self.eta2
    }

    /// Cholesky factor of the precision `-2 eta2`.
    pub fn precision_cholesky(&self) -> Result<&Cholesky<f64, Dyn>> {
        self.precision_chol
            .get_or_init(|| Cholesky::new(&self.eta2 * -2.0))
            .as_ref()
            .ok_or(Error::NotNegativeDefinite)
    }

    /// Checks the negative-definiteness invariant.
    pub fn validate(&self) -> Result<()> {
        self.precision_cholesky().map(|_| ())
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        Ok(self.precision_cholesky()?.solve(&self.eta1))
    }

    pub fn to_moments(&self) -> Result<GaussianMoments> {
        let chol = self.precision_cholesky()?;
        let cov = symmetrize(&chol.inverse());
        let mean = &cov * &self.eta1;
        Ok(GaussianMoments { mean, cov })
    }

    /// Log-partition `A(eta)` including the `(d/2) log 2 pi` base-measure term, so
    /// that `log N(x) = <eta, T(x)> - A(eta)`.
    pub fn log_normalizer(&self) -> Result<f64> {
        let chol = self.precision_cholesky()?;
        let mean = chol.solve(&self.eta1);
        let half_logdet_prec: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        let d = self.dim() as f64;
        Ok(0.5 * self.eta1.dot(&mean) - half_logdet_prec + 0.5 * d * LN_2PI)
    }

    /// `E[T(X)] = (mu, Sigma + mu mu^T)`, the gradient of the log-partition.
    pub fn expected_stats(&self) -> Result<SufficientStat> {
        let m = self.to_moments()?;
        let t2 = &m.cov + &m.mean * m.mean.transpose();
        Ok(SufficientStat { t1: m.mean, t2 })
    }

    /// Componentwise sum of natural parameters.
    pub fn add(&self, other: &GaussianNatural) -> Result<GaussianNatural> {
        check_dim(self.dim(), other.dim())?;
        Ok(Self::from_parts_unchecked(
            &self.eta1 + &other.eta1,
            symmetrize(&(&self.eta2 + &other.eta2)),
        ))
    }

    /// `<eta, T> = eta1 . t1 + sum(eta2 .* t2)`.
    pub fn inner(&self, t: &SufficientStat) -> Result<f64> {
        check_dim(self.dim(), t.t1.len())?;
        Ok(self.eta1.dot(&t.t1) + self.eta2.component_mul(&t.t2).sum())
    }

    /// `<eta, T(x)>` without materializing `x x^T`.
    pub fn inner_at(&self, x: &DVector<f64>) -> f64 {
        self.eta1.dot(x) + x.dot(&(&self.eta2 * x))
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.inner_at(x) - self.log_normalizer()?)
    }

    /// Draws `n` i.i.d. samples as `mean + chol(cov) z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<DVector<f64>>> {
        let m = self.to_moments()?;
        let l = Cholesky::new(m.cov.clone())
            .ok_or(Error::NotNegativeDefinite)?
            .unpack();
        let d = self.dim();
        Ok((0..n)
            .map(|_| {
                let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
                &m.mean + &l * z
            })
            .collect())
    }
}

/// Log-density of `N(x; mean, diag(var))`, allocation free.
pub fn diag_gaussian_log_pdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..x.len() {
        let r = x[k] - mean[k];
        acc += r * r / var[k] + var[k].ln();
    }
    -0.5 * (acc + x.len() as f64 * LN_2PI)
}

/// `-1/2 log(2 pi)`.
pub const NEG_HALF_LN_2PI: f64 = -0.5 * LN_2PI;
