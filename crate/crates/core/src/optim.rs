//! Stochastic-approximation updates driven by gradient differences.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::variational::{spectral_project, VarParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Constant,
    /// `gamma0 * t^-kappa`.
    Polynomial { kappa: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub gamma0: f64,
}

impl Schedule {
    pub fn constant(gamma0: f64) -> Result<Self> {
        if !(gamma0 > 0.0) {
            return Err(Error::Config(format!("step size must be positive, got {gamma0}")));
        }
        Ok(Self {
            kind: ScheduleKind::Constant,
            gamma0,
        })
    }

    pub fn polynomial(gamma0: f64, kappa: f64) -> Result<Self> {
        let s = Self::constant(gamma0)?;
        if !(kappa > 0.5 && kappa <= 1.0) {
            return Err(Error::Config(format!("polynomial exponent must lie in (0.5, 1], got {kappa}")));
        }
        Ok(Self {
            kind: ScheduleKind::Polynomial { kappa },
            ..s
        })
    }

    /// Step size `gamma_t` for `t >= 1`.
    pub fn value(&self, t: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.gamma0,
            ScheduleKind::Polynomial { kappa } => self.gamma0 * (t.max(1) as f64).powf(-kappa),
        }
    }
}

/// Previous gradient and adaptive moments for one parameter block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub prev_grad: Option<DVector<f64>>,
    pub step: usize,
    pub m: Option<DVector<f64>>,
    pub v: Option<DVector<f64>>,
    pub clip_events: usize,
}

/// `grad_now - prev_grad`, or `grad_now` itself on the first call; records
/// `grad_now` as the new previous gradient.
fn difference(grad_now: &DVector<f64>, opt: &mut OptState) -> Result<DVector<f64>> {
    let inc = match &opt.prev_grad {
        Some(prev) => {
            check_dim(prev.len(), grad_now.len())?;
            grad_now - prev
        }
        None => grad_now.clone(),
    };
    opt.prev_grad = Some(grad_now.clone());
    Ok(inc)
}

/// Rescales `inc` to L2 norm `max_norm` if it is longer; returns whether it did.
pub fn clip_increment(inc: &mut DVector<f64>, max_norm: Option<f64>) -> bool {
    match max_norm {
        Some(c) => {
            let n = inc.norm();
            if n > c {
                *inc *= c / n;
                true
            } else {
                false
            }
        }
        None => false,
    }
}

/// Robbins-Monro ascent on the gradient difference:
/// `params += gamma_{k+1} (grad_now - prev_grad)`.
pub fn rm_update(params: &mut DVector<f64>, grad_now: &DVector<f64>, opt: &mut OptState, sched: &Schedule) -> Result<()> {
    check_dim(params.len(), grad_now.len())?;
    let inc = difference(grad_now, opt)?;
    opt.step += 1;
    params.axpy(sched.value(opt.step), &inc, 1.0);
    Ok(())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam ascent step on `increment`.
pub fn adam_update(params: &mut DVector<f64>, increment: &DVector<f64>, opt: &mut OptState, lr: f64) -> Result<()> {
    check_dim(params.len(), increment.len())?;
    let n = params.len();
    let m = opt.m.get_or_insert_with(|| DVector::zeros(n));
    let v = opt.v.get_or_insert_with(|| DVector::zeros(n));
    check_dim(n, m.len())?;
    opt.step += 1;
    let b1t = 1.0 - ADAM_BETA1.powi(opt.step as i32);
    let b2t = 1.0 - ADAM_BETA2.powi(opt.step as i32);
    for k in 0..n {
        let g = increment[k];
        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
        if lr != 0.0 {
            params[k] += lr * (m[k] / b1t) / ((v[k] / b2t).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd(Schedule),
    Adam { lr: f64 },
}

/// What the optimiser is fed: the increment `grad_t - grad_{t-1}` of the
/// cumulative ELBO gradient, or the per-step estimate itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientMode {
    Difference,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub mode: GradientMode,
    pub clip_norm: Option<f64>,
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam { lr },
            mode: GradientMode::Difference,
            clip_norm: Some(1e3),
        }
    }

    /// Learning is switched off: the state is still updated, parameters are not.
    pub fn is_frozen(&self) -> bool {
        match self.kind {
            OptimizerKind::Adam { lr } => lr == 0.0,
            OptimizerKind::Sgd(_) => false,
        }
    }

    /// One update from the current gradient estimate; returns whether the
    /// increment was clipped.
    pub fn step(&self, params: &mut DVector<f64>, grad_now: &DVector<f64>, opt: &mut OptState) -> Result<bool> {
        check_dim(params.len(), grad_now.len())?;
        let mut inc = match self.mode {
            GradientMode::Difference => difference(grad_now, opt)?,
            GradientMode::Raw => grad_now.clone(),
        };
        let clipped = clip_increment(&mut inc, self.clip_norm);
        if clipped {
            opt.clip_events += 1;
        }
        match self.kind {
            OptimizerKind::Sgd(s) => {
                opt.step += 1;
                params.axpy(s.value(opt.step), &inc, 1.0);
            }
            OptimizerKind::Adam { lr } => adam_update(params, &inc, opt, lr)?,
        }
        Ok(clipped)
    }
}

/// Projects the recurrent matrix `W` (if the layout has one) onto the spectral
/// ball of radius `rho_max`; every other slice is left untouched.
pub fn project_hook(params: &mut VarParams, rho_max: f64) -> bool {
    if params.layout.get("W").is_none() {
        return false;
    }
    let w = params.matrix("W");
    let p = spectral_project(&w, rho_max);
    if p == w {
        return false;
    }
    params.set_matrix("W", &p);
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variational::{spectral_norm, AmortizedConfig, AmortizedFamily};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn equal_gradients_do_not_move() {
        let sched = Schedule::constant(0.1).unwrap();
        let mut p = v(&[1.0, 2.0]);
        let mut st = OptState::default();
        rm_update(&mut p, &v(&[0.5, -0.5]), &mut st, &sched).unwrap();
        let after_first = p.clone();
        assert_eq!(after_first, v(&[1.05, 1.95]));
        rm_update(&mut p, &v(&[0.5, -0.5]), &mut st, &sched).unwrap();
        assert_eq!(p, after_first);
    }

    #[test]
    fn polynomial_schedule_value() {
        let s = Schedule::polynomial(2.0, 0.7).unwrap();
        assert!((s.value(10) - 2.0 * 0.19952623149688797).abs() < 1e-14);
        assert!(Schedule::polynomial(1.0, 0.4).is_err());
        assert!(Schedule::constant(0.0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut p = v(&[1.0]);
        let r = rm_update(&mut p, &v(&[1.0, 2.0]), &mut OptState::default(), &Schedule::constant(1.0).unwrap());
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn adam_constant_increment_moves_by_lr() {
        let mut p = v(&[0.0, 0.0]);
        let mut st = OptState::default();
        for _ in 0..5000 {
            let before = p.clone();
            adam_update(&mut p, &v(&[3.0, -0.01]), &mut st, 1e-3).unwrap();
            let d = &p - before;
            assert!((d[0] - 1e-3).abs() < 1e-5 && (d[1] + 1e-3).abs() < 1e-5);
        }
    }

    #[test]
    fn adam_zero_increment_after_warmup_barely_moves() {
        let mut p = v(&[0.0]);
        let mut st = OptState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            adam_update(&mut p, &v(&[rng.random_range(-1.0..1.0)]), &mut st, 1e-3).unwrap();
        }
        let mut q = p.clone();
        let mut st2 = st.clone();
        adam_update(&mut q, &v(&[0.0]), &mut st2, 1e-3).unwrap();
        assert!((q[0] - p[0]).abs() < 1e-3);
        let mut p2 = p.clone();
        adam_update(&mut p2, &v(&[0.0]), &mut st, 1e-3).unwrap();
        assert_eq!(p2, q);
    }

    #[test]
    fn frozen_rate_leaves_parameters_bit_identical() {
        let opt = Optimizer::adam(0.0);
        let mut p = v(&[0.123456789, -3.0]);
        let orig = p.clone();
        let mut st = OptState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            opt.step(&mut p, &v(&[rng.random_range(-9.0..9.0), 1.0]), &mut st).unwrap();
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn clipping_caps_increment() {
        let opt = Optimizer {
            kind: OptimizerKind::Sgd(Schedule::constant(1.0).unwrap()),
            mode: GradientMode::Difference,
            clip_norm: Some(1e3),
        };
        let mut p = v(&[0.0, 0.0]);
        let mut st = OptState::default();
        assert!(opt.step(&mut p, &v(&[3e3, 4e3]), &mut st).unwrap());
        assert!((p.norm() - 1e3).abs() < 1e-9);
        assert_eq!(st.clip_events, 1);
    }

    #[test]
    fn projection_touches_only_recurrent_matrix() {
        let mut c = AmortizedConfig::new(2, 2);
        c.hidden = 5;
        let fam = AmortizedFamily::new(c);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = fam.init_params(&mut rng);
        let feasible = p.clone();
        assert!(!project_hook(&mut p, 0.9));
        assert_eq!(p, feasible);
        p.set_matrix("W", &(DMatrix::identity(5, 5) * 3.0));
        let before = p.clone();
        assert!(project_hook(&mut p, 0.9));
        for s in p.layout.slices() {
            if s.name != "W" {
                assert_eq!(p.slice(&s.name), before.slice(&s.name));
            }
        }
        assert!(spectral_norm(&p.matrix("W")) <= 0.9 + 1e-10);
        let once = p.clone();
        project_hook(&mut p, 0.9);
        assert_eq!(p, once);
    }
}
