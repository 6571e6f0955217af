use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{VarParams, VariationalFamily};
use crate::error::{check_dim, Result};
use crate::expfam::GaussianNatural;
use crate::gradients::tape::{natural_from_raw, raw_natural_len, NodeId, Tape};
use crate::nn::{Activation, MlpArch, MlpParams};
use crate::params::ParamLayout;

/// Parameters `phi^t` of one time step in the non-amortized scheme, kept after
/// the step's inner optimisation has finished.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonAmortizedSlot {
    pub t: usize,
    pub eta_t: GaussianNatural,
    pub params: VarParams,
}

/// Per-step parameters: a free marginal `eta_t` (through the same
/// negative-definite transform as the amortized head) and a potential MLP. The
/// caller re-optimises a fresh copy of the parameters at every time step.
#[derive(Clone, Debug)]
pub struct NonAmortizedFamily {
    dx: usize,
    dy: usize,
    eps: f64,
    eta_off: usize,
    potential_head: MlpParams,
    layout: ParamLayout,
}

impl NonAmortizedFamily {
    pub fn new(dx: usize, dy: usize, potential_hidden: &[usize]) -> Self {
        let mut layout = ParamLayout::new();
        let eta_off = layout.push("eta_raw", &[raw_natural_len(dx)]);
        let mut sizes = vec![dx];
        sizes.extend_from_slice(potential_hidden);
        sizes.push(raw_natural_len(dx));
        let potential_head = MlpArch::new(sizes, Activation::Tanh).register(&mut layout, "head_potential");
        Self {
            dx,
            dy,
            eps: 1e-6,
            eta_off,
            potential_head,
            layout,
        }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> VarParams {
        let mut p = VarParams::zeros(self.layout.clone());
        self.potential_head
            .init_with_output_gain(p.flat.as_mut_slice(), 1.0, super::HEAD_OUTPUT_GAIN, rng);
        p
    }

    pub fn slot(&self, t: usize, params: &VarParams) -> NonAmortizedSlot {
        NonAmortizedSlot {
            t,
            eta_t: self.eta(params),
            params: params.clone(),
        }
    }

    fn eta(&self, params: &VarParams) -> GaussianNatural {
        let k = raw_natural_len(self.dx);
        let raw = &params.flat.as_slice()[self.eta_off..self.eta_off + k];
        GaussianNatural::from_flat(self.dx, natural_from_raw(self.dx, raw, self.eps).as_slice()).expect("width matches")
    }

    fn eta_on_tape(&self, tape: &mut Tape<'_>) -> NodeId {
        // the raw slice enters as a one-column affine map of the constant 1
        let one = tape.input(DVector::from_element(1, 1.0));
        let raw = tape.affine(one, self.eta_off, None, raw_natural_len(self.dx), 1);
        tape.natural_head(raw, self.dx, self.eps)
    }
}

impl VariationalFamily for NonAmortizedFamily {
    type State = usize;

    fn dim_x(&self) -> usize {
        self.dx
    }

    fn initial_state(&self) -> usize {
        0
    }

    fn advance(&self, _params: &VarParams, state: &usize, y: &DVector<f64>) -> Result<usize> {
        check_dim(self.dy, y.len())?;
        Ok(state + 1)
    }

    fn marginal(&self, params: &VarParams, _state: &usize) -> Result<GaussianNatural> {
        Ok(self.eta(params))
    }

    fn potential(&self, params: &VarParams, x_t: &DVector<f64>) -> DVector<f64> {
        let raw = self.potential_head.forward(params.flat.as_slice(), x_t);
        natural_from_raw(self.dx, raw.as_slice(), 0.0)
    }

    fn marginal_vjp(&self, params: &VarParams, _state: &usize, cot: &DVector<f64>, out: &mut [f64]) {
        let mut tape = Tape::new(params.flat.as_slice());
        let eta = self.eta_on_tape(&mut tape);
        tape.vjp_into(eta, cot, out);
    }

    fn potential_vjp(&self, params: &VarParams, x_t: &DVector<f64>, cot: &DVector<f64>, out: &mut [f64]) {
        let mut tape = Tape::new(params.flat.as_slice());
        let xi = tape.input(x_t.clone());
        let raw = self.potential_head.on_tape(&mut tape, xi);
        let eta = tape.natural_head(raw, self.dx, 0.0);
        tape.vjp_into(eta, cot, out);
    }

    fn shares_params_through_time(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradients::fd_check;
    use crate::variational::amortized::score_cotangent;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn marginal_gradient_matches_finite_differences() {
        let fam = NonAmortizedFamily::new(2, 2, &[5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = fam.init_params(&mut rng);
        for v in p.slice_mut("eta_raw") {
            *v = rng.random_range(-1.0..1.0);
        }
        let x = DVector::from_vec(vec![0.3, -0.8]);
        let cot = score_cotangent(&fam.eta(&p), &x).unwrap();
        let mut g = DVector::zeros(p.len());
        fam.marginal_vjp(&p, &0, &cot, g.as_mut_slice());
        let mut q = p.clone();
        let r = fd_check(
            |th| {
                q.flat.copy_from(th);
                fam.eta(&q).log_density(&x).unwrap()
            },
            &p.flat,
            &g,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn slot_records_marginal() {
        let fam = NonAmortizedFamily::new(3, 1, &[4]);
        let p = fam.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let slot = fam.slot(7, &p);
        slot.eta_t.validate().unwrap();
        assert_eq!(slot.t, 7);
        assert!(!fam.shares_params_through_time());
    }
}
