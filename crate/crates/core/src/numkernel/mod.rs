//! Dense numerical primitives shared by both VAE branches and the
//! recommender: small networks with hand-derived backprop, Adam, and the
//! closed-form Gaussian / Bernoulli loss terms.

mod adam;
mod finite_diff;
mod gaussian;
mod matrix;
mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use finite_diff::{finite_diff_grad, grad_close, DEFAULT_FD_EPS};
pub use gaussian::{
    bernoulli_loglik, clamp_log_var, clip_prob, gaussian_kl, gaussian_kl_grad, reparam_sample,
    GaussianParams, KlGrad, LOG_VAR_MAX, LOG_VAR_MIN, PROB_EPS,
};
pub use matrix::{dot, sigmoid, DenseMatrix};
pub use mlp::{mlp_forward, Activation, GradAt, LayerShape, Mlp, MlpParams, Trace};

use rand::Rng;
use rand_distr::StandardNormal;

/// `n` independent standard-normal draws.
pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// A model whose parameters can be walked as a sequence of flat slices.
/// The visiting order defines the layout of that model's gradient buffer.
pub trait ParamVisit {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    fn assign(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }
}

impl ParamVisit for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.params())
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.params_mut())
    }
}

/// Adam update across every slice of a [`ParamVisit`] model.
pub fn adam_step_model<M: ParamVisit + ?Sized>(model: &mut M, grads: &[f64], state: &mut AdamState) {
    let mut flat = model.flatten();
    adam_step(&mut flat, grads, state);
    model.assign(&flat);
}
