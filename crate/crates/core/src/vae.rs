//! Pieces shared by the two VAE branches: Gaussian encoder heads with
//! clamped log-variance and Bernoulli decoders over the item axis.

use crate::error::{Error, Result};
use crate::numkernel::{clip_prob, Activation, GaussianParams, GradAt, Mlp, Trace, PROB_EPS};

pub(crate) fn gaussian_net(input: usize, hidden: usize, latent: usize) -> Result<Mlp> {
    Mlp::build(&[input, hidden, 2 * latent], Activation::Tanh, Activation::Identity)
}

pub(crate) fn bernoulli_net(latent: usize, hidden: usize, items: usize) -> Result<Mlp> {
    Mlp::build(&[latent, hidden, items], Activation::Tanh, Activation::Sigmoid)
}

pub(crate) struct HeadPass {
    pub trace: Trace,
    pub gaussian: GaussianParams,
    pub mask: Vec<f64>,
}

pub(crate) fn head_forward(net: &Mlp, input: &[f64]) -> Result<HeadPass> {
    let trace = net.forward_trace(input)?;
    let (gaussian, mask) = GaussianParams::from_network_output(trace.output())?;
    Ok(HeadPass { trace, gaussian, mask })
}

pub(crate) fn head_backward(
    net: &Mlp,
    pass: &HeadPass,
    g_mean: &[f64],
    g_log_var: &[f64],
    grad: &mut [f64],
) {
    let mut upstream = Vec::with_capacity(2 * g_mean.len());
    upstream.extend_from_slice(g_mean);
    upstream.extend(g_log_var.iter().zip(&pass.mask).map(|(g, m)| g * m));
    net.backward(&pass.trace, &upstream, GradAt::Output, grad, false);
}

pub(crate) fn decode(net: &Mlp, z: &[f64]) -> Result<Vec<f64>> {
    Ok(net.forward(z)?.into_iter().map(clip_prob).collect())
}

/// Negative Bernoulli log-likelihood of `a` under `net(z)` and its gradient
/// with respect to `z`. Decoder parameter gradients are accumulated into `grad`.
pub(crate) fn decoder_nll_backward(
    net: &Mlp,
    z: &[f64],
    a: &[f64],
    grad: &mut [f64],
) -> Result<(f64, Vec<f64>)> {
    let trace = net.forward_trace(z)?;
    let mu = trace.output();
    if mu.len() != a.len() {
        return Err(Error::config("exposure length does not match decoder output"));
    }
    let mut nll = 0.0;
    let mut g_logit = vec![0.0; mu.len()];
    for (i, (&m, &ai)) in mu.iter().zip(a).enumerate() {
        let clipped = clip_prob(m);
        nll -= ai * clipped.ln() + (1.0 - ai) * (1.0 - clipped).ln();
        if m > PROB_EPS && m < 1.0 - PROB_EPS {
            g_logit[i] = m - ai;
        }
    }
    let g_z = net
        .backward(&trace, &g_logit, GradAt::PreActivation, grad, true)
        .expect("input gradient requested");
    Ok((nll, g_z))
}
