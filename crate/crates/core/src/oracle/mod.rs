//! Closed-form references for the linear-Gaussian model: Kalman filter, RTS
//! smoother, exact backward kernels, and exact expectations of the ELBO
//! statistics under any Gaussian family with affine backward kernels.

#[cfg(test)]
mod dense;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{symmetrize, GaussianMoments, GaussianNatural};
use crate::models::{LinearGaussianSsm, StateSpaceModel};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterOutput {
    pub pred_mean: Vec<DVector<f64>>,
    pub pred_cov: Vec<DMatrix<f64>>,
    pub filt_mean: Vec<DVector<f64>>,
    pub filt_cov: Vec<DMatrix<f64>>,
    pub loglik_increments: DVector<f64>,
}

impl FilterOutput {
    pub fn loglik(&self) -> f64 {
        self.loglik_increments.sum()
    }

    pub fn len(&self) -> usize {
        self.filt_mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filt_mean.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmootherOutput {
    pub smooth_mean: Vec<DVector<f64>>,
    pub smooth_cov: Vec<DMatrix<f64>>,
    /// `J_t = P^f_t F^T (P^p_{t+1})^{-1}` for `t < T`.
    pub backward_gain: Vec<DMatrix<f64>>,
    /// `Cov(X_t, X_{t+1} | y_{0:T})` for `t < T`.
    pub pairwise_cov: Vec<DMatrix<f64>>,
}

/// `X_{t-1} | X_t = x ~ N(a x + b, cov)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineGaussianKernel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn chol(m: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m)).ok_or(Error::NotSpd(what))
}

fn half_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    c.l_dirty().diagonal().iter().map(|v| v.ln()).sum()
}

pub fn as_lgssm(model: &dyn StateSpaceModel) -> Result<&LinearGaussianSsm> {
    model
        .as_any()
        .downcast_ref::<LinearGaussianSsm>()
        .ok_or_else(|| Error::ModelMismatch("a linear-Gaussian model is required".into()))
}

/// Prior moments of `X_0`.
pub fn kalman_prior(model: &LinearGaussianSsm) -> (DVector<f64>, DMatrix<f64>) {
    (model.mu0.clone(), model.q0_cov())
}

pub fn kalman_predict(model: &LinearGaussianSsm, mean: &DVector<f64>, cov: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let f = model.f();
    (f * mean, symmetrize(&(f * cov * f.transpose() + model.q_cov())))
}

/// Measurement update in Joseph form. `NaN` coordinates of `y` are dropped.
/// Returns the filtered moments and `log p(y_t | y_{0:t-1})`.
pub fn kalman_update(
    model: &LinearGaussianSsm,
    pred_mean: &DVector<f64>,
    pred_cov: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let obs: Vec<usize> = (0..y.len()).filter(|&k| !y[k].is_nan()).collect();
    if obs.is_empty() {
        return Ok((pred_mean.clone(), pred_cov.clone(), 0.0));
    }
    let dx = pred_mean.len();
    let g = model.g().select_rows(&obs);
    let r = DMatrix::identity(obs.len(), obs.len()) * model.r_var;
    let ys = DVector::from_iterator(obs.len(), obs.iter().map(|&k| y[k]));
    let innov = ys - &g * pred_mean;
    let s = symmetrize(&(&g * pred_cov * g.transpose() + &r));
    let sc = chol(&s, "innovation covariance")?;
    let gain = (sc.solve(&(&g * pred_cov))).transpose();
    let mean = pred_mean + &gain * &innov;
    let ikg = DMatrix::identity(dx, dx) - &gain * &g;
    let cov = symmetrize(&(&ikg * pred_cov * ikg.transpose() + &gain * r * gain.transpose()));
    let quad = innov.dot(&sc.solve(&innov));
    let ll = -0.5 * (obs.len() as f64 * LN_2PI + quad) - half_logdet(&sc);
    Ok((mean, cov, ll))
}

pub fn kalman_filter(model: &LinearGaussianSsm, ys: &[DVector<f64>]) -> Result<FilterOutput> {
    if ys.is_empty() {
        return Err(Error::EmptyStream);
    }
    let n = ys.len();
    let mut out = FilterOutput {
        pred_mean: Vec::with_capacity(n),
        pred_cov: Vec::with_capacity(n),
        filt_mean: Vec::with_capacity(n),
        filt_cov: Vec::with_capacity(n),
        loglik_increments: DVector::zeros(n),
    };
    let (mut pm, mut pc) = kalman_prior(model);
    for (t, y) in ys.iter().enumerate() {
        if t > 0 {
            (pm, pc) = kalman_predict(model, &out.filt_mean[t - 1], &out.filt_cov[t - 1]);
        }
        let (m, c, ll) = kalman_update(model, &pm, &pc, y)?;
        out.pred_mean.push(pm.clone());
        out.pred_cov.push(pc.clone());
        out.filt_mean.push(m);
        out.filt_cov.push(c);
        out.loglik_increments[t] = ll;
    }
    Ok(out)
}

pub fn kalman_smoother(model: &LinearGaussianSsm, filt: &FilterOutput) -> Result<SmootherOutput> {
    let n = filt.len();
    if n == 0 {
        return Err(Error::EmptyStream);
    }
    let mut smooth_mean = filt.filt_mean.clone();
    let mut smooth_cov = filt.filt_cov.clone();
    let mut backward_gain = vec![DMatrix::zeros(0, 0); n - 1];
    let mut pairwise_cov = vec![DMatrix::zeros(0, 0); n - 1];
    for t in (0..n - 1).rev() {
        let pc = chol(&filt.pred_cov[t + 1], "predicted covariance")?;
        // J = P^f F^T (P^p)^{-1}, solved as (P^p)^{-1} F P^f transposed
        let j = pc.solve(&(model.f() * &filt.filt_cov[t])).transpose();
        smooth_mean[t] = &filt.filt_mean[t] + &j * (&smooth_mean[t + 1] - &filt.pred_mean[t + 1]);
        smooth_cov[t] = symmetrize(&(&filt.filt_cov[t] + &j * (&smooth_cov[t + 1] - &filt.pred_cov[t + 1]) * j.transpose()));
        pairwise_cov[t] = &j * &smooth_cov[t + 1];
        backward_gain[t] = j;
    }
    Ok(SmootherOutput {
        smooth_mean,
        smooth_cov,
        backward_gain,
        pairwise_cov,
    })
}

/// Law of `X_{t-1}` given `X_t` and `y_{0:t-1}`.
pub fn exact_backward_kernel(model: &LinearGaussianSsm, filt: &FilterOutput, t: usize) -> Result<AffineGaussianKernel> {
    if t == 0 || t >= filt.len() {
        return Err(Error::Config(format!("backward kernel index {t} out of range")));
    }
    let pc = chol(&filt.pred_cov[t], "predicted covariance")?;
    let a = pc.solve(&(model.f() * &filt.filt_cov[t - 1])).transpose();
    let b = &filt.filt_mean[t - 1] - &a * &filt.pred_mean[t];
    let cov = symmetrize(&(&filt.filt_cov[t - 1] - &a * &filt.pred_cov[t] * a.transpose()));
    Ok(AffineGaussianKernel { a, b, cov })
}

/// A Gaussian variational law on `X_{0:T}` in backward form: the marginal of
/// `X_T` and one affine kernel per step, `kernels[s - 1]` giving `X_{s-1} | X_s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianChain {
    pub last: GaussianMoments,
    pub kernels: Vec<AffineGaussianKernel>,
}

impl GaussianChain {
    /// Builds the chain from marginals `eta_0..eta_T` and potentials
    /// `eta~_s(x) = (b_s x, c_s)` for `s = 1..T` (`pots[s - 1]`).
    pub fn from_natural(etas: &[GaussianNatural], pots: &[(DMatrix<f64>, DMatrix<f64>)]) -> Result<Self> {
        if etas.is_empty() || pots.len() + 1 != etas.len() {
            return Err(Error::Config("need T+1 marginals and T potentials".into()));
        }
        let kernels = pots
            .iter()
            .enumerate()
            .map(|(k, (b, c))| {
                let eta = &etas[k];
                let prec = (eta.eta2() + c) * -2.0;
                let pc = chol(&prec, "backward kernel precision")?;
                let cov = symmetrize(&pc.inverse());
                Ok(AffineGaussianKernel {
                    a: &cov * b,
                    b: &cov * eta.eta1(),
                    cov,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            last: etas.last().expect("non-empty").to_moments()?,
            kernels,
        })
    }

    /// Marginal moments of every `X_s` and `Cov(X_{s-1}, X_s)` for `s >= 1`.
    pub fn moments(&self) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let n = self.kernels.len() + 1;
        let mut means = vec![DVector::zeros(0); n];
        let mut covs = vec![DMatrix::zeros(0, 0); n];
        let mut cross = vec![DMatrix::zeros(0, 0); n - 1];
        means[n - 1] = self.last.mean.clone();
        covs[n - 1] = self.last.cov.clone();
        for s in (1..n).rev() {
            let k = &self.kernels[s - 1];
            cross[s - 1] = &k.a * &covs[s];
            means[s - 1] = &k.a * &means[s] + &k.b;
            covs[s - 1] = symmetrize(&(&k.a * &covs[s] * k.a.transpose() + &k.cov));
        }
        (means, covs, cross)
    }
}

/// `E[log N(z; mu, c)]` for `z` with mean `ez` and covariance `vz`.
fn expected_log_gauss(ez: &DVector<f64>, vz: &DMatrix<f64>, mu: &DVector<f64>, c: &DMatrix<f64>) -> Result<f64> {
    let cc = chol(c, "density covariance")?;
    let diff = ez - mu;
    let tr = cc.solve(vz).trace();
    Ok(-0.5 * (ez.len() as f64 * LN_2PI + tr + diff.dot(&cc.solve(&diff))) - half_logdet(&cc))
}

fn expected_log_g(m: &LinearGaussianSsm, mean: &DVector<f64>, cov: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    let obs: Vec<usize> = (0..y.len()).filter(|&k| !y[k].is_nan()).collect();
    if obs.is_empty() {
        return Ok(0.0);
    }
    let g = m.g().select_rows(&obs);
    let ys = DVector::from_iterator(obs.len(), obs.iter().map(|&k| y[k]));
    // E log N(y; G x, R) = E log N(G x; y, R)
    expected_log_gauss(
        &(&g * mean),
        &(&g * cov * g.transpose()),
        &ys,
        &(DMatrix::identity(obs.len(), obs.len()) * m.r_var),
    )
}

/// `E_q[H_T(X_T)]` in closed form for a Gaussian chain `q` on the
/// linear-Gaussian model, with `T = ys.len() - 1`.
pub fn expected_h(model: &dyn StateSpaceModel, chain: &GaussianChain, ys: &[DVector<f64>]) -> Result<f64> {
    let m = as_lgssm(model)?;
    if ys.len() != chain.kernels.len() + 1 {
        return Err(Error::DimensionMismatch {
            expected: chain.kernels.len() + 1,
            got: ys.len(),
        });
    }
    let (means, covs, cross) = chain.moments();
    let d = m.dim_x() as f64;
    let mut h = expected_log_gauss(&means[0], &covs[0], &m.mu0, &m.q0_cov())? + expected_log_g(m, &means[0], &covs[0], &ys[0])?;
    let f = m.f();
    for s in 1..ys.len() {
        let c = &cross[s - 1];
        let ez = &means[s] - f * &means[s - 1];
        let fc = f * c;
        let vz = symmetrize(&(&covs[s] - &fc - fc.transpose() + f * &covs[s - 1] * f.transpose()));
        h += expected_log_gauss(&ez, &vz, &DVector::zeros(ez.len()), &m.q_cov())?;
        h += expected_log_g(m, &means[s], &covs[s], &ys[s])?;
        // minus E log q_{s-1|s}: the kernel's entropy, constant in x_s
        let kc = chol(&chain.kernels[s - 1].cov, "kernel covariance")?;
        h += 0.5 * d * (1.0 + LN_2PI) + half_logdet(&kc);
    }
    Ok(h)
}

/// Exact ELBO: `E_q[H_T] + entropy(q_T)`.
pub fn exact_elbo(model: &dyn StateSpaceModel, chain: &GaussianChain, ys: &[DVector<f64>]) -> Result<f64> {
    let h = expected_h(model, chain, ys)?;
    let c = chol(&chain.last.cov, "last marginal covariance")?;
    Ok(h + 0.5 * chain.last.mean.len() as f64 * (1.0 + LN_2PI) + half_logdet(&c))
}

/// The exact posterior in backward form: filtering marginal at `T` and exact
/// backward kernels.
pub fn posterior_chain(model: &LinearGaussianSsm, filt: &FilterOutput) -> Result<GaussianChain> {
    let n = filt.len();
    let kernels = (1..n).map(|t| exact_backward_kernel(model, filt, t)).collect::<Result<Vec<_>>>()?;
    Ok(GaussianChain {
        last: GaussianMoments {
            mean: filt.filt_mean[n - 1].clone(),
            cov: filt.filt_cov[n - 1].clone(),
        },
        kernels,
    })
}
