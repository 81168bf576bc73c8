//! Identifiable VAE branch: conditional prior `p(Z | W)`, posterior
//! `q(Z | A, W)` and a Bernoulli decoder `p(A | Z)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{
    gaussian_kl, gaussian_kl_grad, reparam_sample, GaussianParams, Mlp, ParamVisit,
};
use crate::vae;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvaeModel {
    pub prior_net: Mlp,
    pub encoder_net: Mlp,
    pub decoder_net: Mlp,
    pub latent_dim: usize,
}

/// Loss value, its components, and the gradient for one user.
#[derive(Debug, Clone)]
pub struct IvaeEval {
    /// Negative ELBO.
    pub loss: f64,
    pub recon_nll: f64,
    pub kl: f64,
    /// Reparameterized sample of Z used for the reconstruction term.
    pub z_sample: Vec<f64>,
    /// Gradient of `loss`, laid out as prior | encoder | decoder.
    pub grad: Vec<f64>,
}

impl IvaeModel {
    /// Zero-initialised model with one hidden layer per network.
    pub fn new(num_items: usize, proxy_dim: usize, latent_dim: usize, hidden_dim: usize) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::config("latent_dim must be at least 1"));
        }
        Ok(Self {
            prior_net: vae::gaussian_net(proxy_dim, hidden_dim, latent_dim)?,
            encoder_net: vae::gaussian_net(num_items + proxy_dim, hidden_dim, latent_dim)?,
            decoder_net: vae::bernoulli_net(latent_dim, hidden_dim, num_items)?,
            latent_dim,
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.prior_net.init_glorot(rng);
        self.encoder_net.init_glorot(rng);
        self.decoder_net.init_glorot(rng);
    }

    pub fn num_items(&self) -> usize {
        self.decoder_net.output_dim()
    }

    pub fn proxy_dim(&self) -> usize {
        self.prior_net.input_dim()
    }

    pub fn prior(&self, w: &[f64]) -> Result<GaussianParams> {
        Ok(vae::head_forward(&self.prior_net, w)?.gaussian)
    }

    pub fn encode(&self, a: &[f64], w: &[f64]) -> Result<GaussianParams> {
        Ok(vae::head_forward(&self.encoder_net, &concat(a, w))?.gaussian)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim {
            return Err(Error::config("latent vector has the wrong dimension"));
        }
        vae::decode(&self.decoder_net, z)
    }

    /// Single-sample ELBO: `log p(A | z) − KL(q(Z | A, W) ‖ p(Z | W))`.
    pub fn elbo(&self, a: &[f64], w: &[f64], noise: &[f64]) -> Result<f64> {
        let q = self.encode(a, w)?;
        let p = self.prior(w)?;
        let z = reparam_sample(&q, noise)?;
        let mu = self.decode(&z)?;
        Ok(crate::numkernel::bernoulli_loglik(a, &mu)? - gaussian_kl(&q, &p)?)
    }

    /// Negative ELBO and its analytic gradient for one user.
    pub fn loss_and_grad(&self, a: &[f64], w: &[f64], noise: &[f64]) -> Result<IvaeEval> {
        let np = self.prior_net.param_count();
        let ne = self.encoder_net.param_count();
        let mut grad = vec![0.0; self.param_count()];
        let (g_prior, rest) = grad.split_at_mut(np);
        let (g_enc, g_dec) = rest.split_at_mut(ne);

        let prior = vae::head_forward(&self.prior_net, w)?;
        let post = vae::head_forward(&self.encoder_net, &concat(a, w))?;
        let z = reparam_sample(&post.gaussian, noise)?;
        let (recon_nll, g_z) = vae::decoder_nll_backward(&self.decoder_net, &z, a, g_dec)?;
        let kl = gaussian_kl(&post.gaussian, &prior.gaussian)?;
        let kg = gaussian_kl_grad(&post.gaussian, &prior.gaussian);

        let d = self.latent_dim;
        let mut g_mean = vec![0.0; d];
        let mut g_lv = vec![0.0; d];
        for j in 0..d {
            g_mean[j] = g_z[j] + kg.q_mean[j];
            let dz_dlv = 0.5 * (0.5 * post.gaussian.log_var[j]).exp() * noise[j];
            g_lv[j] = g_z[j] * dz_dlv + kg.q_log_var[j];
        }
        vae::head_backward(&self.encoder_net, &post, &g_mean, &g_lv, g_enc);
        vae::head_backward(&self.prior_net, &prior, &kg.p_mean, &kg.p_log_var, g_prior);

        Ok(IvaeEval {
            loss: recon_nll + kl,
            recon_nll,
            kl,
            z_sample: z,
            grad,
        })
    }
}

impl ParamVisit for IvaeModel {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.prior_net.params());
        f(self.encoder_net.params());
        f(self.decoder_net.params());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.prior_net.params_mut());
        f(self.encoder_net.params_mut());
        f(self.decoder_net.params_mut());
    }
}

fn concat(a: &[f64], w: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(a.len() + w.len());
    x.extend_from_slice(a);
    x.extend_from_slice(w);
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{finite_diff_grad, grad_close, mlp_forward, standard_normal_vec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_model_gives_standard_normal_and_half_probabilities() {
        let m = IvaeModel::new(6, 3, 2, 5).unwrap();
        let w = [1.0, 0.0, 1.0];
        let a = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(m.prior(&w).unwrap(), GaussianParams::standard(2));
        assert_eq!(m.encode(&a, &w).unwrap(), GaussianParams::standard(2));
        assert_eq!(m.decode(&[0.3, -0.2]).unwrap(), vec![0.5; 6]);
        let elbo = m.elbo(&a, &w, &[0.7, -1.1]).unwrap();
        assert!((elbo - 6.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_network_oracle() {
        let mut m = IvaeModel::new(5, 2, 3, 4).unwrap();
        m.init(&mut ChaCha8Rng::seed_from_u64(1));
        let w = [0.0, 1.0];
        let raw = mlp_forward(&m.prior_net, &w).unwrap();
        let p = m.prior(&w).unwrap();
        assert_eq!(p.mean, raw[..3].to_vec());
        assert_eq!(p.log_var, raw[3..].to_vec());
        assert_eq!(m.prior(&w).unwrap(), m.prior(&w).unwrap());
    }

    #[test]
    fn positive_weight_makes_decoder_monotone() {
        use crate::numkernel::{Activation, DenseMatrix};
        let mut m = IvaeModel::new(2, 1, 1, 1).unwrap();
        m.decoder_net = Mlp::from_layers(vec![(
            DenseMatrix::from_rows(&[vec![1.5], vec![-0.5]]).unwrap(),
            vec![0.0, 0.0],
            Activation::Sigmoid,
        )])
        .unwrap();
        let lo = m.decode(&[0.1]).unwrap();
        let hi = m.decode(&[0.9]).unwrap();
        assert!(hi[0] > lo[0]);
        assert!(hi[1] < lo[1]);
    }

    #[test]
    fn elbo_is_non_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = IvaeModel::new(8, 3, 2, 6).unwrap();
        m.init(&mut rng);
        for _ in 0..20 {
            let a: Vec<f64> = (0..8).map(|_| rng.random_range(0..2) as f64).collect();
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(0..2) as f64).collect();
            let e = standard_normal_vec(&mut rng, 2);
            assert!(m.elbo(&a, &w, &e).unwrap() <= 0.0);
        }
    }

    #[test]
    fn kl_vanishes_when_encoder_matches_prior() {
        // prior and encoder both ignore their inputs and emit the same bias
        let mut m = IvaeModel::new(4, 2, 2, 3).unwrap();
        for net in [&mut m.prior_net, &mut m.encoder_net] {
            let n = net.param_count();
            net.params_mut()[n - 4..].copy_from_slice(&[0.3, -0.2, 0.5, -1.0]);
        }
        let a = [1.0, 0.0, 1.0, 0.0];
        let w = [1.0, 0.0];
        let eval = m.loss_and_grad(&a, &w, &[0.2, 0.1]).unwrap();
        assert_eq!(eval.kl, 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = IvaeModel::new(5, 3, 2, 4).unwrap();
        m.init(&mut rng);
        let a = [1.0, 0.0, 1.0, 1.0, 0.0];
        let w = [0.0, 1.0, 0.0];
        let e = [0.4, -0.9];
        let eval = m.loss_and_grad(&a, &w, &e).unwrap();
        let flat = m.flatten();
        let fd = finite_diff_grad(
            |p| {
                let mut mm = m.clone();
                mm.assign(p);
                -mm.elbo(&a, &w, &e).unwrap()
            },
            &flat,
            1e-5,
        );
        for (x, y) in eval.grad.iter().zip(&fd) {
            assert!(grad_close(*x, *y, 1e-4, 1e-6), "{x} vs {y}");
        }
    }
}
