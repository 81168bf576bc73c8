//! Causality-constrained VAE branch: `q(Z_lc | A)` against a standard-normal
//! prior, a Bernoulli decoder, and an L2 pull toward the iVAE sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{
    bernoulli_loglik, gaussian_kl, gaussian_kl_grad, reparam_sample, GaussianParams, Mlp,
    ParamVisit,
};
use crate::vae;

/// Added under the square root so the norm is differentiable at zero.
pub const ALIGN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcvaeModel {
    pub encoder_net: Mlp,
    pub decoder_net: Mlp,
    pub latent_dim: usize,
}

#[derive(Debug, Clone)]
pub struct LcvaeEval {
    /// `recon_nll + kl + λ · align`.
    pub loss: f64,
    pub recon_nll: f64,
    pub kl: f64,
    /// Unweighted alignment norm (0 when λ = 0, where the term is skipped).
    pub align: f64,
    pub z_sample: Vec<f64>,
    /// Gradient of `loss`, laid out as encoder | decoder.
    pub grad: Vec<f64>,
}

/// `sqrt(Σ (z_lc − z)² + 1e-12)`.
pub fn alignment_penalty(z_lc: &[f64], z: &[f64]) -> Result<f64> {
    if z_lc.len() != z.len() {
        return Err(Error::config("alignment needs vectors in the same latent space"));
    }
    let ss: f64 = z_lc.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss + ALIGN_EPS).sqrt())
}

impl LcvaeModel {
    pub fn new(num_items: usize, latent_dim: usize, hidden_dim: usize) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::config("latent_dim must be at least 1"));
        }
        Ok(Self {
            encoder_net: vae::gaussian_net(num_items, hidden_dim, latent_dim)?,
            decoder_net: vae::bernoulli_net(latent_dim, hidden_dim, num_items)?,
            latent_dim,
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.encoder_net.init_glorot(rng);
        self.decoder_net.init_glorot(rng);
    }

    pub fn encode(&self, a: &[f64]) -> Result<GaussianParams> {
        Ok(vae::head_forward(&self.encoder_net, a)?.gaussian)
    }

    pub fn decode(&self, z_lc: &[f64]) -> Result<Vec<f64>> {
        if z_lc.len() != self.latent_dim {
            return Err(Error::config("latent vector has the wrong dimension"));
        }
        vae::decode(&self.decoder_net, z_lc)
    }

    /// Minimisation loss `−log p(A | z_lc) + KL(q ‖ N(0, I)) + λ‖z_lc − z‖`.
    /// `z_from_ivae` is treated as a constant.
    pub fn loss(&self, a: &[f64], z_from_ivae: &[f64], lambda: f64, noise: &[f64]) -> Result<f64> {
        check_lambda(lambda)?;
        let q = self.encode(a)?;
        let z_lc = reparam_sample(&q, noise)?;
        let mu = self.decode(&z_lc)?;
        let base = -bernoulli_loglik(a, &mu)? + gaussian_kl(&q, &GaussianParams::standard(self.latent_dim))?;
        if lambda == 0.0 {
            return Ok(base);
        }
        Ok(base + lambda * alignment_penalty(&z_lc, z_from_ivae)?)
    }

    pub fn loss_and_grad(
        &self,
        a: &[f64],
        z_from_ivae: &[f64],
        lambda: f64,
        noise: &[f64],
    ) -> Result<LcvaeEval> {
        check_lambda(lambda)?;
        let ne = self.encoder_net.param_count();
        let mut grad = vec![0.0; self.param_count()];
        let (g_enc, g_dec) = grad.split_at_mut(ne);

        let post = vae::head_forward(&self.encoder_net, a)?;
        let z_lc = reparam_sample(&post.gaussian, noise)?;
        let (recon_nll, mut g_z) = vae::decoder_nll_backward(&self.decoder_net, &z_lc, a, g_dec)?;
        let standard = GaussianParams::standard(self.latent_dim);
        let kl = gaussian_kl(&post.gaussian, &standard)?;
        let kg = gaussian_kl_grad(&post.gaussian, &standard);

        let mut align = 0.0;
        let mut loss = recon_nll + kl;
        if lambda != 0.0 {
            align = alignment_penalty(&z_lc, z_from_ivae)?;
            loss += lambda * align;
            for j in 0..self.latent_dim {
                g_z[j] += lambda * (z_lc[j] - z_from_ivae[j]) / align;
            }
        }

        let d = self.latent_dim;
        let mut g_mean = vec![0.0; d];
        let mut g_lv = vec![0.0; d];
        for j in 0..d {
            g_mean[j] = g_z[j] + kg.q_mean[j];
            let dz_dlv = 0.5 * (0.5 * post.gaussian.log_var[j]).exp() * noise[j];
            g_lv[j] = g_z[j] * dz_dlv + kg.q_log_var[j];
        }
        vae::head_backward(&self.encoder_net, &post, &g_mean, &g_lv, g_enc);

        Ok(LcvaeEval {
            loss,
            recon_nll,
            kl,
            align,
            z_sample: z_lc,
            grad,
        })
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

impl ParamVisit for LcvaeModel {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.encoder_net.params());
        f(self.decoder_net.params());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.encoder_net.params_mut());
        f(self.decoder_net.params_mut());
    }
}
