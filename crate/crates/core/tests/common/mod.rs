#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use streamvi::expfam::{flat_len, GaussianNatural};
use streamvi::models::LinearGaussianSsm;
use streamvi::oracle::GaussianChain;
use streamvi::params::ParamLayout;
use streamvi::variational::{VarParams, VariationalFamily};
use streamvi::Result;

/// A family whose marginal is affine in the latest observation and whose
/// potential is affine in `x_t`, so that the whole variational law stays
/// Gaussian and its ELBO has a closed form:
/// `eta_t = (a + B_m y_t, -1/2 diag(exp s))`,
/// `eta~(x) = (B_p x, -1/2 diag(exp c))`.
#[derive(Clone, Debug)]
pub struct AffineFamily {
    pub d: usize,
    pub dy: usize,
    layout: ParamLayout,
    a: usize,
    bm: usize,
    s: usize,
    bp: usize,
    c: usize,
}

impl AffineFamily {
    pub fn new(d: usize, dy: usize) -> Self {
        let mut layout = ParamLayout::new();
        let a = layout.push("a", &[d]);
        let bm = layout.push("Bm", &[d, dy]);
        let s = layout.push("s", &[d]);
        let bp = layout.push("Bp", &[d, d]);
        let c = layout.push("c", &[d]);
        Self { d, dy, layout, a, bm, s, bp, c }
    }

    pub fn random_params(&self, rng: &mut ChaCha8Rng) -> VarParams {
        let mut p = VarParams::zeros(self.layout.clone());
        for v in p.flat.iter_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
        p
    }

    fn eta_for(&self, p: &VarParams, y: &DVector<f64>) -> GaussianNatural {
        let f = p.flat.as_slice();
        let d = self.d;
        let eta1 = DVector::from_fn(d, |k, _| f[self.a + k] + (0..self.dy).map(|l| f[self.bm + k + l * d] * y[l]).sum::<f64>());
        let eta2 = DMatrix::from_fn(d, d, |i, j| if i == j { -0.5 * f[self.s + i].exp() } else { 0.0 });
        GaussianNatural::new(eta1, eta2).unwrap()
    }

    pub fn potential_matrices(&self, p: &VarParams) -> (DMatrix<f64>, DMatrix<f64>) {
        let f = p.flat.as_slice();
        let d = self.d;
        let b = DMatrix::from_fn(d, d, |k, l| f[self.bp + k + l * d]);
        let c = DMatrix::from_fn(d, d, |i, j| if i == j { -0.5 * f[self.c + i].exp() } else { 0.0 });
        (b, c)
    }

    /// The variational law on `X_{0:T}` as a Gaussian chain.
    pub fn chain(&self, p: &VarParams, ys: &[DVector<f64>]) -> GaussianChain {
        let etas: Vec<_> = ys.iter().map(|y| self.eta_for(p, y)).collect();
        let pots = vec![self.potential_matrices(p); ys.len() - 1];
        GaussianChain::from_natural(&etas, &pots).unwrap()
    }
}

impl VariationalFamily for AffineFamily {
    type State = DVector<f64>;

    fn dim_x(&self) -> usize {
        self.d
    }

    fn initial_state(&self) -> DVector<f64> {
        DVector::zeros(self.dy)
    }

    fn advance(&self, _: &VarParams, _: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(y.clone())
    }

    fn marginal(&self, p: &VarParams, y: &DVector<f64>) -> Result<GaussianNatural> {
        Ok(self.eta_for(p, y))
    }

    fn potential(&self, p: &VarParams, x: &DVector<f64>) -> DVector<f64> {
        let (b, c) = self.potential_matrices(p);
        let mut out = DVector::zeros(flat_len(self.d));
        out.rows_mut(0, self.d).copy_from(&(b * x));
        out.rows_mut(self.d, self.d * self.d).copy_from_slice(c.as_slice());
        out
    }

    fn marginal_vjp(&self, p: &VarParams, y: &DVector<f64>, cot: &DVector<f64>, out: &mut [f64]) {
        let f = p.flat.as_slice();
        let d = self.d;
        for k in 0..d {
            out[self.a + k] += cot[k];
            for l in 0..self.dy {
                out[self.bm + k + l * d] += cot[k] * y[l];
            }
            out[self.s + k] += cot[d + k + k * d] * -0.5 * f[self.s + k].exp();
        }
    }

    fn potential_vjp(&self, p: &VarParams, x: &DVector<f64>, cot: &DVector<f64>, out: &mut [f64]) {
        let f = p.flat.as_slice();
        let d = self.d;
        for k in 0..d {
            for l in 0..d {
                out[self.bp + k + l * d] += cot[k] * x[l];
            }
            out[self.c + k] += cot[d + k + k * d] * -0.5 * f[self.c + k].exp();
        }
    }
}

pub fn random_lgssm(d: usize, rng: &mut ChaCha8Rng) -> LinearGaussianSsm {
    let f = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.7..0.7));
    let g = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    LinearGaussianSsm::with_default_noise(f, g).unwrap()
}

/// Central finite-difference gradient.
pub fn fd_gradient(mut f: impl FnMut(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut z = x.clone();
    for k in 0..x.len() {
        z[k] = x[k] + h;
        let up = f(&z);
        z[k] = x[k] - h;
        let down = f(&z);
        z[k] = x[k];
        g[k] = (up - down) / (2.0 * h);
    }
    g
}

/// Sample mean and standard error of the mean, per component.
pub fn mean_and_stderr(samples: &[DVector<f64>]) -> (DVector<f64>, DVector<f64>) {
    let n = samples.len() as f64;
    let mean = samples.iter().fold(DVector::zeros(samples[0].len()), |a, s| a + s) / n;
    let var = samples.iter().fold(DVector::zeros(mean.len()), |a, s| a + (s - &mean).map(|v| v * v)) / (n - 1.0);
    (mean, var.map(|v| (v / n).sqrt()))
}
