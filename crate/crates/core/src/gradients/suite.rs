//! Randomised finite-difference checks of the three analytic gradients.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fd_check, grad_phi_log_backward, grad_phi_log_marginal, grad_theta_htilde};
use crate::error::Result;
use crate::models::{ChaoticRnn, LinearGaussianSsm, ResidualNonlinearSsm, StateSpaceModel};
use crate::variational::amortized::{AmortizedConfig, AmortizedFamily, AmortizerWindow};

/// Outcome of one gradient's batch of checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub name: String,
    pub instances: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, d: usize, s: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(-s..s))
}

fn random_family(rng: &mut ChaCha8Rng) -> AmortizedFamily {
    let dx = rng.random_range(1..=3);
    let dy = rng.random_range(1..=3);
    let mut c = AmortizedConfig::new(dx, dy);
    c.hidden = rng.random_range(3..=8);
    c.marginal_hidden = vec![rng.random_range(2..=6)];
    c.potential_hidden = vec![rng.random_range(2..=6)];
    c.truncation_window = rng.random_range(0..=3);
    AmortizedFamily::new(c)
}

fn random_window(rng: &mut ChaCha8Rng, f: &AmortizedFamily) -> AmortizerWindow {
    AmortizerWindow {
        start: uniform(rng, f.config.hidden, 0.9),
        ys: (0..f.config.truncation_window).map(|_| uniform(rng, f.config.dy, 1.5)).collect(),
    }
}

fn random_model(rng: &mut ChaCha8Rng, k: usize) -> Box<dyn StateSpaceModel> {
    let seed: u64 = rng.random();
    let mut m: Box<dyn StateSpaceModel> = match k % 3 {
        0 => {
            let dx = rng.random_range(1..=3);
            let dy = rng.random_range(1..=3);
            let f = DMatrix::from_fn(dx, dx, |_, _| rng.random_range(-1.0..1.0));
            let g = DMatrix::from_fn(dy, dx, |_, _| rng.random_range(-1.0..1.0));
            Box::new(LinearGaussianSsm::with_default_noise(f, g).expect("valid shapes"))
        }
        1 => Box::new(ChaoticRnn::benchmark(rng.random_range(1..=4), seed)),
        _ => {
            let dx = rng.random_range(1..=3);
            Box::new(ResidualNonlinearSsm::new(dx, rng.random_range(1..=3), &[4, 3], 1.0, 0.1, seed))
        }
    };
    let theta = m.params().flat.map(|v| v + rng.random_range(-0.1..0.1));
    m.set_params(&theta).expect("same length");
    m
}

fn outcome(name: &str, errors: &[f64]) -> SuiteOutcome {
    SuiteOutcome {
        name: name.into(),
        instances: errors.len(),
        failures: errors.iter().filter(|e| !(**e <= FD_TOL)).count(),
        max_rel_error: errors.iter().cloned().fold(0.0, f64::max),
    }
}

/// Runs `instances` random checks of each gradient (step [`FD_STEP`], relative
/// tolerance [`FD_TOL`]) and reports one outcome per gradient.
pub fn fd_suite(instances: usize, seed: u64) -> Result<Vec<SuiteOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut marg = Vec::with_capacity(instances);
    let mut back = Vec::with_capacity(instances);
    let mut theta = Vec::with_capacity(instances);
    for k in 0..instances {
        let f = random_family(&mut rng);
        let p = f.init_params(&mut rng);
        let window = random_window(&mut rng, &f);
        let dx = f.config.dx;
        let x = uniform(&mut rng, dx, 1.5);
        let g = grad_phi_log_marginal(&f, &p, &window, &x)?;
        let mut q = p.clone();
        let r = fd_check(
            |th| {
                q.flat.copy_from(th);
                f.marginal_from_window(&q, &window).log_density(&x).unwrap_or(f64::NAN)
            },
            &p.flat,
            &g,
            FD_STEP,
            FD_TOL,
        )?;
        marg.push(r.max_rel_error);

        let x_prev = uniform(&mut rng, dx, 1.5);
        let g = grad_phi_log_backward(&f, &p, &window, &x, &x_prev)?;
        let r = fd_check(
            |th| {
                q.flat.copy_from(th);
                let eta = f.marginal_from_window(&q, &window);
                f.log_backward(&q, &eta, &x, &x_prev).unwrap_or(f64::NAN)
            },
            &p.flat,
            &g,
            FD_STEP,
            FD_TOL,
        )?;
        back.push(r.max_rel_error);

        let model = random_model(&mut rng, k);
        let (mdx, mdy) = (model.dim_x(), model.dim_y());
        let x_prev = uniform(&mut rng, mdx, 1.0);
        let x = uniform(&mut rng, mdx, 1.0);
        let mut y = uniform(&mut rng, mdy, 1.0);
        if mdy > 1 && k % 4 == 3 {
            y[0] = f64::NAN;
        }
        let t = [0, 1, 7][(k / 3) % 3];
        let g = grad_theta_htilde(model.as_ref(), &x_prev, &x, &y, t);
        let theta0 = model.params().flat.clone();
        let mut m = clone_model(model.as_ref());
        let r = fd_check(
            |th| {
                m.set_params(th).expect("same length");
                m.log_m(&x_prev, &x, t) + m.log_g(&x, &y)
            },
            &theta0,
            &g,
            FD_STEP,
            FD_TOL,
        )?;
        theta.push(r.max_rel_error);
    }
    Ok(vec![
        outcome("grad_phi_log_marginal", &marg),
        outcome("grad_phi_log_backward", &back),
        outcome("grad_theta_htilde", &theta),
    ])
}

fn clone_model(m: &dyn StateSpaceModel) -> Box<dyn StateSpaceModel> {
    let any = m.as_any();
    if let Some(m) = any.downcast_ref::<LinearGaussianSsm>() {
        Box::new(m.clone())
    } else if let Some(m) = any.downcast_ref::<ChaoticRnn>() {
        Box::new(m.clone())
    } else {
        Box::new(any.downcast_ref::<ResidualNonlinearSsm>().expect("suite models only").clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let out = fd_suite(6, 3).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|o| o.passed() && o.instances == 6), "{out:?}");
    }
}
