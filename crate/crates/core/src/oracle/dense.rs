//! Brute-force joint-Gaussian evaluation of the linear-Gaussian model, for
//! small horizons only.

use nalgebra::{DMatrix, DVector};

use crate::models::{LinearGaussianSsm, StateSpaceModel};

pub struct DenseOracle {
    dx: usize,
    n: usize,
    post_mean: DVector<f64>,
    post_cov: DMatrix<f64>,
    loglik: f64,
}

impl DenseOracle {
    pub fn new(m: &LinearGaussianSsm, ys: &[DVector<f64>]) -> Self {
        let (dx, dy, n) = (m.dim_x(), m.dim_y(), ys.len());
        assert!(n * dx <= 12, "dense oracle is capped at 12 latent dimensions");
        // latent moments
        let mut mean_x = DVector::zeros(n * dx);
        let mut var = vec![m.q0_cov()];
        mean_x.rows_mut(0, dx).copy_from(&m.mu0);
        for t in 1..n {
            let prev = mean_x.rows(dx * (t - 1), dx).into_owned();
            mean_x.rows_mut(dx * t, dx).copy_from(&(m.f() * prev));
            let p = m.f() * &var[t - 1] * m.f().transpose() + m.q_cov();
            var.push(p);
        }
        let mut cov_x = DMatrix::zeros(n * dx, n * dx);
        for s in 0..n {
            let mut block = var[s].clone();
            for t in s..n {
                cov_x.view_mut((dx * s, dx * t), (dx, dx)).copy_from(&block);
                cov_x.view_mut((dx * t, dx * s), (dx, dx)).copy_from(&block.transpose());
                block = &block * m.f().transpose();
            }
        }
        // observed coordinates
        let mut rows = Vec::new();
        let mut yv = Vec::new();
        for (t, y) in ys.iter().enumerate() {
            for k in 0..dy {
                if !y[k].is_nan() {
                    rows.push((t, k));
                    yv.push(y[k]);
                }
            }
        }
        let mut h = DMatrix::zeros(rows.len(), n * dx);
        for (r, &(t, k)) in rows.iter().enumerate() {
            for l in 0..dx {
                h[(r, dx * t + l)] = m.g()[(k, l)];
            }
        }
        let y = DVector::from_vec(yv);
        let mean_y = &h * &mean_x;
        let cov_y = &h * &cov_x * h.transpose() + DMatrix::identity(rows.len(), rows.len()) * m.r_var;
        let cov_xy = &cov_x * h.transpose();
        let chol = cov_y.clone().cholesky().expect("spd");
        let resid = &y - &mean_y;
        let sol = chol.solve(&resid);
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let loglik = -0.5 * (rows.len() as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + resid.dot(&sol));
        let post_mean = &mean_x + &cov_xy * sol;
        let post_cov = &cov_x - &cov_xy * chol.solve(&cov_xy.transpose());
        Self {
            dx,
            n,
            post_mean,
            post_cov,
            loglik,
        }
    }

    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    /// Posterior marginal moments of every `X_t`.
    pub fn smoothing(&self) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
        let d = self.dx;
        (0..self.n)
            .map(|t| {
                (
                    self.post_mean.rows(d * t, d).into_owned(),
                    self.post_cov.view((d * t, d * t), (d, d)).into_owned(),
                )
            })
            .unzip()
    }

    pub fn cross_cov(&self, s: usize, t: usize) -> DMatrix<f64> {
        let d = self.dx;
        self.post_cov.view((d * s, d * t), (d, d)).into_owned()
    }
}
