use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
pub const PROB_EPS: f64 = 1e-7;

/// Diagonal Gaussian stored as mean and log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParams {
    /// Builds the distribution, clamping `log_var` into `[-10, 10]`.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::config("mean and log_var lengths differ"));
        }
        let log_var = log_var.into_iter().map(clamp_log_var).collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    /// Splits a network output `mean ‖ log_var` into a Gaussian. The second
    /// value is the pass-through mask of the clamp (1 inside, 0 where clamped).
    pub fn from_network_output(raw: &[f64]) -> Result<(Self, Vec<f64>)> {
        if raw.len() % 2 != 0 {
            return Err(Error::config("Gaussian head must emit an even number of values"));
        }
        let d = raw.len() / 2;
        let mask = raw[d..]
            .iter()
            .map(|&v| if v > LOG_VAR_MIN && v < LOG_VAR_MAX { 1.0 } else { 0.0 })
            .collect();
        let g = Self::new(raw[..d].to_vec(), raw[d..].to_vec())?;
        Ok((g, mask))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

#[inline]
pub fn clamp_log_var(v: f64) -> f64 {
    v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

#[inline]
pub fn clip_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// KL(q ‖ p) between diagonal Gaussians, summed over dimensions.
pub fn gaussian_kl(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::config("KL between Gaussians of different dimension"));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (mq, lq, mp, lp) = (q.mean[i], q.log_var[i], p.mean[i], p.log_var[i]);
        if !(mq.is_finite() && lq.is_finite() && mp.is_finite() && lp.is_finite()) {
            return Err(Error::Numerical("non-finite Gaussian parameters in KL".into()));
        }
        let diff = mq - mp;
        kl += 0.5 * (lp - lq) + (lq.exp() + diff * diff) / (2.0 * lp.exp()) - 0.5;
    }
    Ok(kl)
}

/// Partial derivatives of `gaussian_kl(q, p)`.
#[derive(Debug, Clone)]
pub struct KlGrad {
    pub q_mean: Vec<f64>,
    pub q_log_var: Vec<f64>,
    pub p_mean: Vec<f64>,
    pub p_log_var: Vec<f64>,
}

pub fn gaussian_kl_grad(q: &GaussianParams, p: &GaussianParams) -> KlGrad {
    let d = q.dim();
    let mut g = KlGrad {
        q_mean: vec![0.0; d],
        q_log_var: vec![0.0; d],
        p_mean: vec![0.0; d],
        p_log_var: vec![0.0; d],
    };
    for i in 0..d {
        let vq = q.log_var[i].exp();
        let vp = p.log_var[i].exp();
        let diff = q.mean[i] - p.mean[i];
        g.q_mean[i] = diff / vp;
        g.p_mean[i] = -diff / vp;
        g.q_log_var[i] = 0.5 * (vq / vp - 1.0);
        g.p_log_var[i] = 0.5 * (1.0 - (vq + diff * diff) / vp);
    }
    g
}

/// `Σ a log μ + (1 − a) log(1 − μ)` with μ clipped into `[1e-7, 1 − 1e-7]`.
pub fn bernoulli_loglik(a: &[f64], mu: &[f64]) -> Result<f64> {
    if a.len() != mu.len() {
        return Err(Error::config(format!(
            "observation length {} does not match probability length {}",
            a.len(),
            mu.len()
        )));
    }
    Ok(a
        .iter()
        .zip(mu)
        .map(|(&ai, &m)| {
            let m = clip_prob(m);
            ai * m.ln() + (1.0 - ai) * (1.0 - m).ln()
        })
        .sum())
}

/// `mean + exp(log_var / 2) ⊙ noise`.
pub fn reparam_sample(g: &GaussianParams, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != g.dim() {
        return Err(Error::config("noise dimension does not match the Gaussian"));
    }
    Ok(g.mean
        .iter()
        .zip(&g.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle_kl_1d(mq: f64, vq: f64, mp: f64, vp: f64) -> f64 {
        // closed form written in terms of variances, independent of the log-var path
        ((vp / vq).sqrt()).ln() + (vq + (mq - mp).powi(2)) / (2.0 * vp) - 0.5
    }

    #[test]
    fn kl_hand_values() {
        let std1 = GaussianParams::standard(3);
        assert_eq!(gaussian_kl(&std1, &std1).unwrap(), 0.0);
        let q = GaussianParams::new(vec![1.0], vec![0.0]).unwrap();
        let p = GaussianParams::standard(1);
        let expected = oracle_kl_1d(1.0, 1.0, 0.0, 1.0);
        assert!((expected - 0.5).abs() < 1e-15);
        assert!((gaussian_kl(&q, &p).unwrap() - 0.5).abs() < 1e-12);
        let q = GaussianParams::new(vec![0.0], vec![4f64.ln()]).unwrap();
        let expected = oracle_kl_1d(0.0, 4.0, 0.0, 1.0);
        assert!((expected - 0.806_852_819_440_054_7).abs() < 1e-12);
        assert!((gaussian_kl(&q, &p).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_non_finite() {
        let q = GaussianParams { mean: vec![f64::NAN], log_var: vec![0.0] };
        assert!(matches!(
            gaussian_kl(&q, &GaussianParams::standard(1)),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn log_var_is_clamped() {
        let g = GaussianParams::new(vec![0.0, 0.0], vec![-50.0, 50.0]).unwrap();
        assert_eq!(g.log_var, vec![LOG_VAR_MIN, LOG_VAR_MAX]);
        let (_, mask) = GaussianParams::from_network_output(&[0.0, 0.0, -50.0, 1.0]).unwrap();
        assert_eq!(mask, vec![0.0, 1.0]);
    }

    #[test]
    fn bernoulli_hand_values() {
        let near_one = 1.0 - 1e-7;
        assert!(bernoulli_loglik(&[1.0, 1.0], &[near_one, near_one]).unwrap().abs() < 1e-6);
        let two_halves = 2.0 * 0.5f64.ln();
        assert!((bernoulli_loglik(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - two_halves).abs() < 1e-12);
        assert!((two_halves + 1.386294).abs() < 1e-6);
        let v = bernoulli_loglik(&[1.0, 0.0, 1.0], &[0.9, 0.1, 0.8]).unwrap();
        let oracle = 0.9f64.ln() + 0.9f64.ln() + 0.8f64.ln();
        assert!((v - oracle).abs() < 1e-12);
        assert!((oracle + 0.433864).abs() < 1e-6);
        assert!(bernoulli_loglik(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn bernoulli_is_finite_at_the_boundary() {
        let v = bernoulli_loglik(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(v.is_finite() && v < 0.0);
    }

    #[test]
    fn reparam_cases() {
        let g = GaussianParams::new(vec![0.3, -1.0], vec![0.2, 1.0]).unwrap();
        assert_eq!(reparam_sample(&g, &[0.0, 0.0]).unwrap(), g.mean);
        let unit = GaussianParams::standard(1);
        assert_eq!(reparam_sample(&unit, &[1.0]).unwrap(), vec![1.0]);
        let g = GaussianParams::new(vec![2.0], vec![4f64.ln()]).unwrap();
        assert!((reparam_sample(&g, &[0.5]).unwrap()[0] - 3.0).abs() < 1e-12);
        assert!(reparam_sample(&g, &[0.5, 1.0]).is_err());
    }

    #[test]
    fn kl_grad_matches_finite_differences() {
        let q = GaussianParams::new(vec![0.4, -1.2], vec![0.3, -0.7]).unwrap();
        let p = GaussianParams::new(vec![-0.1, 0.5], vec![-0.2, 0.9]).unwrap();
        let g = gaussian_kl_grad(&q, &p);
        let pack = |q: &GaussianParams, p: &GaussianParams| {
            [q.mean.clone(), q.log_var.clone(), p.mean.clone(), p.log_var.clone()].concat()
        };
        let x = pack(&q, &p);
        let fd = crate::numkernel::finite_diff_grad(
            |v| {
                let q = GaussianParams { mean: v[0..2].to_vec(), log_var: v[2..4].to_vec() };
                let p = GaussianParams { mean: v[4..6].to_vec(), log_var: v[6..8].to_vec() };
                gaussian_kl(&q, &p).unwrap()
            },
            &x,
            1e-5,
        );
        let analytic = [g.q_mean, g.q_log_var, g.p_mean, g.p_log_var].concat();
        for (a, b) in analytic.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
