//! Stage one: joint mini-batch training of the iVAE and the constrained VAE,
//! then extraction of per-user posterior means.

use std::time::Instant;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{build_exposure, InteractionDataset};
use crate::error::{Error, Result};
use crate::ivae::IvaeModel;
use crate::lcvae::LcvaeModel;
use crate::numkernel::{adam_step_model, standard_normal_vec, AdamConfig, AdamState, ParamVisit};
use crate::rng::{stream, Stream};

/// Users per gradient work unit. Chunk sums are reduced in chunk order, so
/// results do not depend on the number of worker threads.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ValMetric {
    #[default]
    #[serde(rename = "ndcg@5")]
    Ndcg5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    /// Relative improvement of the combined loss below which an epoch
    /// counts toward `patience`.
    pub tolerance: f64,
    pub seed: u64,
    pub val_metric: ValMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 4,
            hidden_dim: 64,
            lr: 1e-3,
            weight_decay: 1e-6,
            lambda: 0.9,
            epochs: 200,
            batch_size: 256,
            patience: 10,
            tolerance: 1e-4,
            seed: 0,
            val_metric: ValMetric::Ndcg5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.latent_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config("latent_dim and hidden_dim must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.lambda > 1.0 {
            warn!("lambda = {} is above the conventional range [0, 1]", self.lambda);
        }
        Ok(())
    }
}

/// Which networks a stage-one run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branches {
    /// iVAE and constrained VAE together.
    Joint,
    IvaeOnly,
    /// The exposure VAE alone with no alignment term.
    PlainVae,
}

/// Per-user exposure rows and proxy vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOneData {
    pub exposure: Vec<Vec<f64>>,
    pub proxies: Vec<Vec<f64>>,
}

impl StageOneData {
    pub fn from_dataset(dataset: &InteractionDataset) -> Self {
        Self {
            exposure: build_exposure(dataset).into_iter().map(|r| r.a).collect(),
            proxies: dataset.proxy_matrix(),
        }
    }

    pub fn num_users(&self) -> usize {
        self.exposure.len()
    }

    pub fn num_items(&self) -> usize {
        self.exposure.first().map_or(0, Vec::len)
    }

    pub fn proxy_dim(&self) -> usize {
        self.proxies.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ivae_loss: Option<f64>,
    pub lcvae_loss: Option<f64>,
    /// Reconstruction NLL and KL of the exposure VAE (iVAE when it runs alone).
    pub recon: f64,
    pub kl: f64,
    pub align: f64,
    pub wall_ms: f64,
}

impl EpochLog {
    pub fn combined(&self) -> f64 {
        self.ivae_loss.unwrap_or(0.0) + self.lcvae_loss.unwrap_or(0.0)
    }
}

/// Per-user posterior means: `z_lc` from the exposure VAE, `z` from the iVAE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationTable {
    pub z_lc: Vec<Vec<f64>>,
    pub z: Option<Vec<Vec<f64>>>,
}

impl RepresentationTable {
    pub fn num_users(&self) -> usize {
        self.z_lc.len()
    }

    pub fn width(&self) -> usize {
        self.z_lc.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone)]
pub struct StageOne {
    pub ivae: Option<IvaeModel>,
    pub lcvae: Option<LcvaeModel>,
    pub log: Vec<EpochLog>,
    /// Epoch at which the patience rule stopped training, if it did.
    pub stopped_early_at: Option<usize>,
}

impl StageOne {
    /// Representation table for the trained models. Requires the exposure VAE.
    pub fn table(&self, data: &StageOneData) -> Result<RepresentationTable> {
        let lcvae = self
            .lcvae
            .as_ref()
            .ok_or_else(|| Error::config("stage one ran without the exposure VAE"))?;
        let z_lc = extract_zlc(lcvae, &data.exposure)?;
        let z = match &self.ivae {
            Some(m) => Some(extract_z(m, &data.exposure, &data.proxies)?),
            None => None,
        };
        Ok(RepresentationTable { z_lc, z })
    }
}

/// Observer called after every epoch with the current models.
pub type EpochObserver<'a> = dyn FnMut(usize, Option<&IvaeModel>, Option<&LcvaeModel>) + 'a;

pub fn train_representations(data: &StageOneData, config: &TrainConfig) -> Result<(StageOne, RepresentationTable)> {
    let out = train_with(data, config, Branches::Joint, &mut |_, _, _| {})?;
    let table = out.table(data)?;
    Ok((out, table))
}

struct UserEval {
    ivae: Option<(f64, f64, f64)>,
    lcvae: Option<(f64, f64, f64, f64)>,
}

struct ChunkSum {
    g_ivae: Vec<f64>,
    g_lcvae: Vec<f64>,
    ivae_loss: f64,
    lcvae_loss: f64,
    recon: f64,
    kl: f64,
    align: f64,
}

pub fn train_with(
    data: &StageOneData,
    config: &TrainConfig,
    branches: Branches,
    observer: &mut EpochObserver<'_>,
) -> Result<StageOne> {
    config.validate()?;
    let n_users = data.num_users();
    if n_users == 0 || data.num_items() == 0 {
        return Err(Error::config("stage one needs at least one user and one item"));
    }
    if data.proxies.len() != n_users {
        return Err(Error::config("proxy rows must match exposure rows"));
    }
    let latent = config.latent_dim;
    let lambda = if branches == Branches::PlainVae { 0.0 } else { config.lambda };
    let adam_cfg = AdamConfig::new(config.lr, config.weight_decay);

    let mut ivae = match branches {
        Branches::Joint | Branches::IvaeOnly => {
            let mut m = IvaeModel::new(data.num_items(), data.proxy_dim(), latent, config.hidden_dim)?;
            m.init(&mut stream(config.seed, Stream::IvaeInit));
            Some(m)
        }
        Branches::PlainVae => None,
    };
    let mut lcvae = match branches {
        Branches::Joint | Branches::PlainVae => {
            let mut m = LcvaeModel::new(data.num_items(), latent, config.hidden_dim)?;
            m.init(&mut stream(config.seed, Stream::LcvaeInit));
            Some(m)
        }
        Branches::IvaeOnly => None,
    };
    let mut ivae_adam = match &ivae {
        Some(m) => Some(AdamState::new(m.param_count(), adam_cfg)?),
        None => None,
    };
    let mut lcvae_adam = match &lcvae {
        Some(m) => Some(AdamState::new(m.param_count(), adam_cfg)?),
        None => None,
    };

    let mut order_rng = stream(config.seed, Stream::BatchOrder);
    let mut ivae_noise_rng = stream(config.seed, Stream::IvaeNoise);
    let mut lcvae_noise_rng = stream(config.seed, Stream::LcvaeNoise);
    let mut order: Vec<usize> = (0..n_users).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut stopped_early_at = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut order_rng);
        let mut totals = [0.0f64; 5];
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let noise_i: Vec<Vec<f64>> = match &ivae {
                Some(_) => batch.iter().map(|_| standard_normal_vec(&mut ivae_noise_rng, latent)).collect(),
                None => Vec::new(),
            };
            let noise_l: Vec<Vec<f64>> = match &lcvae {
                Some(_) => batch.iter().map(|_| standard_normal_vec(&mut lcvae_noise_rng, latent)).collect(),
                None => Vec::new(),
            };
            let iv = ivae.as_ref();
            let lc = lcvae.as_ref();
            let n_iv = iv.map_or(0, |m| m.param_count());
            let n_lc = lc.map_or(0, |m| m.param_count());
            let chunks: Vec<Result<ChunkSum>> = (0..batch.len().div_ceil(CHUNK))
                .into_par_iter()
                .map(|c| {
                    let lo = c * CHUNK;
                    let hi = (lo + CHUNK).min(batch.len());
                    let mut s = ChunkSum {
                        g_ivae: vec![0.0; n_iv],
                        g_lcvae: vec![0.0; n_lc],
                        ivae_loss: 0.0,
                        lcvae_loss: 0.0,
                        recon: 0.0,
                        kl: 0.0,
                        align: 0.0,
                    };
                    for k in lo..hi {
                        let u = batch[k];
                        let a = &data.exposure[u];
                        let mut z_target = None;
                        let mut ev = UserEval { ivae: None, lcvae: None };
                        if let Some(m) = iv {
                            let e = m.loss_and_grad(a, &data.proxies[u], &noise_i[k])?;
                            add(&mut s.g_ivae, &e.grad);
                            ev.ivae = Some((e.loss, e.recon_nll, e.kl));
                            z_target = Some(e.z_sample);
                        }
                        if let Some(m) = lc {
                            let zeros;
                            let target = match &z_target {
                                Some(z) => z.as_slice(),
                                None => {
                                    zeros = vec![0.0; latent];
                                    zeros.as_slice()
                                }
                            };
                            let e = m.loss_and_grad(a, target, lambda, &noise_l[k])?;
                            add(&mut s.g_lcvae, &e.grad);
                            ev.lcvae = Some((e.loss, e.recon_nll, e.kl, e.align));
                        }
                        if let Some((loss, recon, kl)) = ev.ivae {
                            s.ivae_loss += loss;
                            if ev.lcvae.is_none() {
                                s.recon += recon;
                                s.kl += kl;
                            }
                        }
                        if let Some((loss, recon, kl, align)) = ev.lcvae {
                            s.lcvae_loss += loss;
                            s.recon += recon;
                            s.kl += kl;
                            s.align += align;
                        }
                    }
                    Ok(s)
                })
                .collect();

            let mut g_iv = vec![0.0; n_iv];
            let mut g_lc = vec![0.0; n_lc];
            let mut batch_loss = [0.0f64; 5];
            for c in chunks {
                let c = c.map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!(
                        "{msg} at epoch {epoch}, batch {batch_idx}; parameter norms: ivae {}, lcvae {}",
                        param_norm(ivae.as_ref()),
                        param_norm(lcvae.as_ref()),
                    )),
                    other => other,
                })?;
                add(&mut g_iv, &c.g_ivae);
                add(&mut g_lc, &c.g_lcvae);
                for (t, v) in batch_loss.iter_mut().zip([c.ivae_loss, c.lcvae_loss, c.recon, c.kl, c.align]) {
                    *t += v;
                }
            }
            let finite = batch_loss.iter().all(|v| v.is_finite())
                && g_iv.iter().all(|v| v.is_finite())
                && g_lc.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at epoch {epoch}, batch {batch_idx} ({} users); \
                     ivae loss {}, lcvae loss {}; parameter norms: ivae {}, lcvae {}",
                    batch.len(),
                    batch_loss[0],
                    batch_loss[1],
                    param_norm(ivae.as_ref()),
                    param_norm(lcvae.as_ref()),
                )));
            }
            let inv = 1.0 / batch.len() as f64;
            if let (Some(m), Some(st)) = (ivae.as_mut(), ivae_adam.as_mut()) {
                g_iv.iter_mut().for_each(|g| *g *= inv);
                adam_step_model(m, &g_iv, st);
            }
            if let (Some(m), Some(st)) = (lcvae.as_mut(), lcvae_adam.as_mut()) {
                g_lc.iter_mut().for_each(|g| *g *= inv);
                adam_step_model(m, &g_lc, st);
            }
            for (t, v) in totals.iter_mut().zip(batch_loss) {
                *t += v;
            }
        }
        let n = n_users as f64;
        let entry = EpochLog {
            epoch,
            ivae_loss: ivae.as_ref().map(|_| totals[0] / n),
            lcvae_loss: lcvae.as_ref().map(|_| totals[1] / n),
            recon: totals[2] / n,
            kl: totals[3] / n,
            align: totals[4] / n,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        debug!("stage one epoch {epoch}: combined {:.6}", entry.combined());
        let combined = entry.combined();
        log.push(entry);
        observer(epoch, ivae.as_ref(), lcvae.as_ref());

        if best.is_finite() && (best - combined) / best.abs().max(f64::MIN_POSITIVE) < config.tolerance {
            stale += 1;
        } else {
            stale = 0;
        }
        best = best.min(combined);
        if stale >= config.patience {
            stopped_early_at = Some(epoch);
            break;
        }
    }
    Ok(StageOne {
        ivae,
        lcvae,
        log,
        stopped_early_at,
    })
}

fn add(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn param_norm<M: ParamVisit>(m: Option<&M>) -> String {
    match m {
        Some(m) => format!("{:.4e}", m.flatten().iter().map(|p| p * p).sum::<f64>().sqrt()),
        None => "-".into(),
    }
}

/// Posterior mean of `q(Z_lc | A_u)` for every user.
pub fn extract_zlc(model: &LcvaeModel, exposure: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    exposure.iter().map(|a| Ok(model.encode(a)?.mean)).collect()
}

/// Posterior mean of `q(Z | A_u, W_u)` for every user.
pub fn extract_z(model: &IvaeModel, exposure: &[Vec<f64>], proxies: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if exposure.len() != proxies.len() {
        return Err(Error::config("proxy rows must match exposure rows"));
    }
    exposure.iter().zip(proxies).map(|(a, w)| Ok(model.encode(a, w)?.mean)).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_data(users: usize, items: usize, proxy: usize, seed: u64) -> StageOneData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut exposure = Vec::new();
        let mut proxies = Vec::new();
        for u in 0..users {
            let group = u % 2;
            exposure.push(
                (0..items)
                    .map(|i| {
                        let p = if i % 2 == group { 0.8 } else { 0.1 };
                        f64::from(rng.random::<f64>() < p)
                    })
                    .collect(),
            );
            proxies.push((0..proxy).map(|k| f64::from(k == group)).collect());
        }
        StageOneData { exposure, proxies }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            latent_dim: 2,
            hidden_dim: 8,
            lr: 1e-2,
            epochs: 50,
            batch_size: 8,
            patience: 1000,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_on_toy_data() {
        let data = toy_data(20, 10, 2, 1);
        let (out, table) = train_representations(&data, &small_config()).unwrap();
        let first = out.log.first().unwrap().combined();
        let last = out.log.last().unwrap().combined();
        assert!(last < first, "{first} -> {last}");
        assert_eq!(table.num_users(), 20);
        assert!(table.z_lc.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = toy_data(20, 10, 2, 2);
        let cfg = TrainConfig { epochs: 5, ..small_config() };
        let a = train_with(&data, &cfg, Branches::Joint, &mut |_, _, _| {}).unwrap();
        let b = train_with(&data, &cfg, Branches::Joint, &mut |_, _, _| {}).unwrap();
        assert_eq!(a.ivae, b.ivae);
        assert_eq!(a.lcvae, b.lcvae);
        let la: Vec<f64> = a.log.iter().map(EpochLog::combined).collect();
        let lb: Vec<f64> = b.log.iter().map(EpochLog::combined).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let data = toy_data(30, 10, 2, 3);
        let cfg = TrainConfig { epochs: 3, ..small_config() };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| train_with(&data, &cfg, Branches::Joint, &mut |_, _, _| {}).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.lcvae, b.lcvae);
        assert_eq!(a.ivae, b.ivae);
    }

    #[test]
    fn lambda_zero_matches_plain_vae_each_epoch() {
        let data = toy_data(20, 10, 2, 4);
        let cfg = TrainConfig { epochs: 5, lambda: 0.0, ..small_config() };
        let mut joint = Vec::new();
        train_with(&data, &cfg, Branches::Joint, &mut |_, _, l| joint.push(l.unwrap().flatten())).unwrap();
        let mut plain = Vec::new();
        train_with(&data, &cfg, Branches::PlainVae, &mut |_, _, l| plain.push(l.unwrap().flatten())).unwrap();
        assert_eq!(joint.len(), 5);
        assert_eq!(joint, plain);
    }

    #[test]
    fn ivae_trajectory_ignores_the_second_branch() {
        let data = toy_data(20, 10, 2, 5);
        let cfg = TrainConfig { epochs: 5, lambda: 0.9, ..small_config() };
        let mut joint = Vec::new();
        train_with(&data, &cfg, Branches::Joint, &mut |_, i, _| joint.push(i.unwrap().flatten())).unwrap();
        let mut alone = Vec::new();
        train_with(&data, &cfg, Branches::IvaeOnly, &mut |_, i, _| alone.push(i.unwrap().flatten())).unwrap();
        assert_eq!(joint, alone);
    }

    #[test]
    fn extraction_uses_posterior_means() {
        let data = toy_data(6, 5, 2, 6);
        let zero = LcvaeModel::new(5, 3, 4).unwrap();
        let t = extract_zlc(&zero, &data.exposure).unwrap();
        assert!(t.iter().flatten().all(|&v| v == 0.0));

        let mut m = LcvaeModel::new(5, 3, 4).unwrap();
        m.init(&mut ChaCha8Rng::seed_from_u64(0));
        let t = extract_zlc(&m, &data.exposure).unwrap();
        assert_eq!(t[2], m.encode(&data.exposure[2]).unwrap().mean);
        let twins = vec![data.exposure[0].clone(), data.exposure[0].clone()];
        let t = extract_zlc(&m, &twins).unwrap();
        assert_eq!(t[0], t[1]);
    }

    #[test]
    fn patience_stops_a_flat_run() {
        let data = toy_data(10, 6, 2, 7);
        let cfg = TrainConfig { lr: 1e-12, epochs: 100, patience: 3, ..small_config() };
        let out = train_with(&data, &cfg, Branches::Joint, &mut |_, _, _| {}).unwrap();
        assert!(out.stopped_early_at.is_some());
        assert!(out.log.len() < 100);
    }

    #[test]
    fn rejects_bad_config() {
        let data = toy_data(4, 4, 2, 8);
        for cfg in [
            TrainConfig { epochs: 0, ..small_config() },
            TrainConfig { batch_size: 0, ..small_config() },
            TrainConfig { lambda: -1.0, ..small_config() },
        ] {
            assert!(matches!(train_representations(&data, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn non_finite_input_aborts_with_diagnostics() {
        let mut data = toy_data(4, 4, 2, 9);
        data.proxies[1][0] = f64::NAN;
        let err = train_representations(&data, &small_config()).unwrap_err();
        match err {
            Error::Numerical(msg) => assert!(msg.contains("parameter norms"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    #[ignore = "timing-sensitive; run explicitly on an idle machine"]
    fn wall_clock_scales_with_epochs() {
        let data = toy_data(400, 100, 4, 10);
        let time = |epochs| {
            let cfg = TrainConfig { epochs, patience: 10_000, hidden_dim: 32, batch_size: 64, ..small_config() };
            let t = Instant::now();
            train_with(&data, &cfg, Branches::Joint, &mut |_, _, _| {}).unwrap();
            t.elapsed().as_secs_f64()
        };
        time(2);
        let (t1, t2) = (time(10), time(20));
        let ratio = t2 / t1;
        assert!((ratio - 2.0).abs() / 2.0 < 0.2, "ratio {ratio}");
    }
}
