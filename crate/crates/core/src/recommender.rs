//! Stage two: matrix factorization with a bilinear confounder head, its
//! training loop, the potential-outcome estimator and baseline variants.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::lcvae::LcvaeModel;
use crate::metrics::evaluate;
use crate::numkernel::{adam_step, dot, sigmoid, AdamConfig, AdamState, DenseMatrix, GaussianParams, ParamVisit};
use crate::rng::{stream, Stream};

pub const EMBED_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfParams {
    /// `num_users × d_mf`.
    pub p: DenseMatrix,
    /// `num_items × d_mf`.
    pub q: DenseMatrix,
    pub b_u: Vec<f64>,
    pub b_i: Vec<f64>,
    pub global_bias: f64,
}

impl MfParams {
    pub fn zeros(num_users: usize, num_items: usize, d_mf: usize) -> Self {
        Self {
            p: DenseMatrix::zeros(num_users, d_mf),
            q: DenseMatrix::zeros(num_items, d_mf),
            b_u: vec![0.0; num_users],
            b_i: vec![0.0; num_items],
            global_bias: 0.0,
        }
    }

    /// Embeddings from `N(0, 0.01²)`, biases zero.
    pub fn init<R: Rng + ?Sized>(num_users: usize, num_items: usize, d_mf: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(num_users, num_items, d_mf);
        fill_normal(m.p.as_mut_slice(), rng);
        fill_normal(m.q.as_mut_slice(), rng);
        m
    }

    pub fn d_mf(&self) -> usize {
        self.p.cols()
    }

    pub fn num_users(&self) -> usize {
        self.p.rows()
    }

    pub fn num_items(&self) -> usize {
        self.q.rows()
    }
}

/// `(H · z)ᵀ Qc_i`, with `H: d_mf × width` and `Qc: num_items × d_mf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfounderHead {
    pub h: DenseMatrix,
    pub qc: DenseMatrix,
}

impl ConfounderHead {
    pub fn zeros(width: usize, d_mf: usize, num_items: usize) -> Self {
        Self {
            h: DenseMatrix::zeros(d_mf, width),
            qc: DenseMatrix::zeros(num_items, d_mf),
        }
    }

    pub fn init<R: Rng + ?Sized>(width: usize, d_mf: usize, num_items: usize, rng: &mut R) -> Self {
        let mut h = Self::zeros(width, d_mf, num_items);
        fill_normal(h.h.as_mut_slice(), rng);
        fill_normal(h.qc.as_mut_slice(), rng);
        h
    }

    pub fn width(&self) -> usize {
        self.h.cols()
    }

    /// `H · z`; callers check the width.
    fn project(&self, z: &[f64]) -> Vec<f64> {
        (0..self.h.rows()).map(|k| dot(self.h.row(k), z)).collect()
    }

    fn term(&self, i: usize, z: &[f64]) -> f64 {
        dot(&self.project(z), self.qc.row(i))
    }
}

fn fill_normal<R: Rng + ?Sized>(xs: &mut [f64], rng: &mut R) {
    let n = Normal::new(0.0, EMBED_INIT_STD).expect("valid std");
    for x in xs {
        *x = n.sample(rng);
    }
}

fn check_ids(params: &MfParams, u: usize, i: usize) -> Result<()> {
    if u >= params.num_users() {
        return Err(Error::Lookup(format!("user {u} out of range (num_users {})", params.num_users())));
    }
    if i >= params.num_items() {
        return Err(Error::Lookup(format!("item {i} out of range (num_items {})", params.num_items())));
    }
    Ok(())
}

/// `P_u · Q_i + b_u + b_i + global_bias`.
pub fn mf_score(params: &MfParams, u: usize, i: usize) -> Result<f64> {
    check_ids(params, u, i)?;
    Ok(mf_unchecked(params, u, i))
}

fn mf_unchecked(params: &MfParams, u: usize, i: usize) -> f64 {
    dot(params.p.row(u), params.q.row(i)) + params.b_u[u] + params.b_i[i] + params.global_bias
}

pub fn lcdr_score(params: &MfParams, head: &ConfounderHead, u: usize, i: usize, z_lc_u: &[f64]) -> Result<f64> {
    check_ids(params, u, i)?;
    if z_lc_u.len() != head.width() {
        return Err(Error::config(format!(
            "representation width {} does not match head width {}",
            z_lc_u.len(),
            head.width()
        )));
    }
    Ok(mf_unchecked(params, u, i) + head.term(i, z_lc_u))
}

/// Per-user feature rows consumed by the confounder head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub rows: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::config("feature rows have unequal widths"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("feature table has non-finite entries".into()));
        }
        Ok(Self { rows })
    }

    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Row-wise concatenation `[self | other]`.
    pub fn concat(&self, other: &FeatureTable) -> Result<Self> {
        if self.rows.len() != other.rows.len() {
            return Err(Error::config("cannot concatenate tables with different user counts"));
        }
        Self::new(
            self.rows
                .iter()
                .zip(&other.rows)
                .map(|(a, b)| a.iter().chain(b).copied().collect())
                .collect(),
        )
    }
}

/// A trained stage-two model. `head` and `features` are both present or both absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommender {
    pub mf: MfParams,
    pub head: Option<ConfounderHead>,
    pub features: Option<FeatureTable>,
}

impl Recommender {
    pub fn score(&self, u: usize, i: usize) -> Result<f64> {
        match (&self.head, &self.features) {
            (Some(h), Some(f)) => {
                let z = f
                    .rows
                    .get(u)
                    .ok_or_else(|| Error::Lookup(format!("no feature row for user {u}")))?;
                lcdr_score(&self.mf, h, u, i, z)
            }
            _ => mf_score(&self.mf, u, i),
        }
    }

    /// Score with an explicit representation in place of the stored row.
    pub fn score_with(&self, u: usize, i: usize, z: &[f64]) -> Result<f64> {
        match &self.head {
            Some(h) => lcdr_score(&self.mf, h, u, i, z),
            None => mf_score(&self.mf, u, i),
        }
    }

    fn score_fast(&self, u: usize, i: usize) -> f64 {
        let mf = mf_unchecked(&self.mf, u, i);
        match (&self.head, &self.features) {
            (Some(h), Some(f)) => mf + h.term(i, &f.rows[u]),
            _ => mf,
        }
    }

    /// Mean binary cross-entropy over `(user, item, label)` triples and its gradient
    /// in [`ParamVisit`] order.
    pub fn bce_and_grad(&self, batch: &[(usize, usize, f64)]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.param_count()];
        let loss = self.accumulate_bce(batch, &mut grad)?;
        Ok((loss, grad))
    }

    fn accumulate_bce(&self, batch: &[(usize, usize, f64)], grad: &mut [f64]) -> Result<f64> {
        let nu = self.mf.num_users();
        let ni = self.mf.num_items();
        let d = self.mf.d_mf();
        let off_q = nu * d;
        let off_bu = off_q + ni * d;
        let off_bi = off_bu + nu;
        let off_gb = off_bi + ni;
        let off_h = off_gb + 1;
        let width = self.head.as_ref().map_or(0, ConfounderHead::width);
        let off_qc = off_h + d * width;
        let inv = 1.0 / batch.len().max(1) as f64;
        let mut loss = 0.0;
        for &(u, i, y) in batch {
            check_ids(&self.mf, u, i)?;
            let mut s = mf_unchecked(&self.mf, u, i);
            let hz = match (&self.head, &self.features) {
                (Some(h), Some(f)) => {
                    let hz = h.project(&f.rows[u]);
                    s += dot(&hz, h.qc.row(i));
                    Some(hz)
                }
                _ => None,
            };
            loss += softplus(s) - y * s;
            let g = (sigmoid(s) - y) * inv;
            let pu = self.mf.p.row(u);
            let qi = self.mf.q.row(i);
            for k in 0..d {
                grad[u * d + k] += g * qi[k];
                grad[off_q + i * d + k] += g * pu[k];
            }
            grad[off_bu + u] += g;
            grad[off_bi + i] += g;
            grad[off_gb] += g;
            if let (Some(hz), Some(h), Some(f)) = (hz, &self.head, &self.features) {
                let z = &f.rows[u];
                let qci = h.qc.row(i);
                for k in 0..d {
                    let gk = g * qci[k];
                    let row = &mut grad[off_h + k * width..off_h + (k + 1) * width];
                    for (gr, zj) in row.iter_mut().zip(z) {
                        *gr += gk * zj;
                    }
                    grad[off_qc + i * d + k] += g * hz[k];
                }
            }
        }
        Ok(loss * inv)
    }

    fn head_range(&self) -> std::ops::Range<usize> {
        let total = self.param_count();
        let head = self.head.as_ref().map_or(0, |h| h.h.as_slice().len() + h.qc.as_slice().len());
        total - head..total
    }
}

/// Numerically stable `ln(1 + e^s)`.
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

impl ParamVisit for Recommender {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.mf.p.as_slice());
        f(self.mf.q.as_slice());
        f(&self.mf.b_u);
        f(&self.mf.b_i);
        f(std::slice::from_ref(&self.mf.global_bias));
        if let Some(h) = &self.head {
            f(h.h.as_slice());
            f(h.qc.as_slice());
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.mf.p.as_mut_slice());
        f(self.mf.q.as_mut_slice());
        f(&mut self.mf.b_u);
        f(&mut self.mf.b_i);
        f(std::slice::from_mut(&mut self.mf.global_bias));
        if let Some(h) = &mut self.head {
            f(h.h.as_mut_slice());
            f(h.qc.as_mut_slice());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecConfig {
    pub d_mf: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub k: usize,
    /// Keep the confounder head at zero and never update it.
    pub freeze_head: bool,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            d_mf: 32,
            lr: 1e-3,
            weight_decay: 1e-6,
            epochs: 100,
            patience: 10,
            batch_size: 256,
            seed: 0,
            k: 5,
            freeze_head: false,
        }
    }
}

impl RecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_mf == 0 || self.batch_size == 0 || self.k == 0 {
            return Err(Error::config("d_mf, batch_size and k must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecEpochLog {
    pub epoch: usize,
    pub train_bce: f64,
    pub val_ndcg: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecLog {
    pub epochs: Vec<RecEpochLog>,
    /// Epoch whose parameters were kept (best validation NDCG), if any ran.
    pub best_epoch: Option<usize>,
}

/// Untrained model as the training loop would start it.
pub fn init_recommender(dataset: &InteractionDataset, features: Option<&FeatureTable>, config: &RecConfig) -> Result<Recommender> {
    let mf = MfParams::init(
        dataset.num_users,
        dataset.num_items,
        config.d_mf,
        &mut stream(config.seed, Stream::RecommenderInit),
    );
    let (head, features) = match features {
        Some(f) => {
            if f.rows.len() != dataset.num_users {
                return Err(Error::config(format!(
                    "feature table has {} rows for {} users",
                    f.rows.len(),
                    dataset.num_users
                )));
            }
            let head = if config.freeze_head {
                ConfounderHead::zeros(f.width(), config.d_mf, dataset.num_items)
            } else {
                ConfounderHead::init(f.width(), config.d_mf, dataset.num_items, &mut stream(config.seed, Stream::HeadInit))
            };
            (Some(head), Some(f.clone()))
        }
        None => (None, None),
    };
    Ok(Recommender { mf, head, features })
}

/// BCE on train labels with Adam; keeps the parameters of the best
/// validation NDCG@k epoch and stops after `patience` epochs without gain.
pub fn train_recommender(
    dataset: &InteractionDataset,
    features: Option<&FeatureTable>,
    config: &RecConfig,
) -> Result<(Recommender, RecLog)> {
    config.validate()?;
    let mut model = init_recommender(dataset, features, config)?;
    let mut log = RecLog { epochs: Vec::new(), best_epoch: None };
    if config.epochs == 0 {
        return Ok((model, log));
    }
    let mut train: Vec<(usize, usize, f64)> = dataset
        .split_records(Split::Train)
        .map(|r| (r.user, r.item, f64::from(r.label)))
        .collect();
    if train.is_empty() {
        return Err(Error::Split("no train records".into()));
    }
    let has_val = dataset
        .split_records(Split::Val)
        .any(|r| r.label == 1);
    let mut adam = AdamState::new(model.param_count(), AdamConfig::new(config.lr, config.weight_decay))?;
    let frozen = if config.freeze_head { model.head_range() } else { 0..0 };
    let mut order_rng = stream(config.seed, Stream::RecommenderOrder);
    let mut grad = vec![0.0; model.param_count()];
    let mut flat = model.flatten();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        train.shuffle(&mut order_rng);
        let mut total = 0.0;
        for (b, batch) in train.chunks(config.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = model.accumulate_bce(batch, &mut grad)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "recommender loss {loss} at epoch {epoch}, batch {b}; parameter norm {:.4e}",
                    flat.iter().map(|p| p * p).sum::<f64>().sqrt()
                )));
            }
            total += loss * batch.len() as f64;
            if !frozen.is_empty() {
                grad[frozen.clone()].iter_mut().for_each(|g| *g = 0.0);
                let keep: Vec<f64> = flat[frozen.clone()].to_vec();
                adam_step(&mut flat, &grad, &mut adam);
                flat[frozen.clone()].copy_from_slice(&keep);
            } else {
                adam_step(&mut flat, &grad, &mut adam);
            }
            model.assign(&flat);
        }
        let val_ndcg = if has_val {
            Some(evaluate(|u, i| model.score_fast(u, i), dataset, Split::Val, config.k)?.ndcg)
        } else {
            None
        };
        let entry = RecEpochLog {
            epoch,
            train_bce: total / train.len() as f64,
            val_ndcg,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        debug!("stage two epoch {epoch}: bce {:.5} val {:?}", entry.train_bce, val_ndcg);
        log.epochs.push(entry);
        match val_ndcg {
            Some(v) => {
                if best.as_ref().is_none_or(|(b, _)| v > *b) {
                    best = Some((v, flat.clone()));
                    log.best_epoch = Some(epoch);
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.patience {
                        break;
                    }
                }
            }
            None => log.best_epoch = Some(epoch),
        }
    }
    if let Some((_, params)) = best {
        model.assign(&params);
    }
    Ok((model, log))
}

/// Draws latent vectors for Monte-Carlo integration.
pub trait LatentSampler {
    fn sample(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
}

/// Reparameterized draws from a diagonal Gaussian.
pub struct GaussianSampler(pub GaussianParams);

impl LatentSampler for GaussianSampler {
    fn sample(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let sd = self.0.std_dev();
        self.0
            .mean
            .iter()
            .zip(sd)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// `q(Z_lc | A_u)` with the exposure of item `i` set to `a`.
pub fn intervened_posterior(lcvae: &LcvaeModel, exposure_row: &[f64], i: usize, a: f64) -> Result<GaussianSampler> {
    if i >= exposure_row.len() {
        return Err(Error::Lookup(format!("item {i} out of range")));
    }
    let mut row = exposure_row.to_vec();
    row[i] = a;
    Ok(GaussianSampler(lcvae.encode(&row)?))
}

/// Monte-Carlo mean of `sigmoid(score(u, i; z))` over `z` drawn from `sampler`.
pub fn estimate_potential_outcome(
    rec: &Recommender,
    u: usize,
    i: usize,
    sampler: &mut dyn LatentSampler,
    num_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if num_samples == 0 {
        return Err(Error::config("num_samples must be at least 1"));
    }
    if rec.head.is_none() {
        return Ok(sigmoid(mf_score(&rec.mf, u, i)?));
    }
    // running mean, so that a constant integrand is returned exactly
    let mut mean = 0.0;
    for n in 1..=num_samples {
        let z = sampler.sample(rng);
        let x = sigmoid(rec.score_with(u, i, &z)?);
        mean += (x - mean) / n as f64;
    }
    Ok(mean)
}

/// Method identifiers understood by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lcdr,
    Mf,
    MfWf,
    VaeIvaeConcat,
    LcdrWoLc,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Lcdr, Method::Mf, Method::MfWf, Method::VaeIvaeConcat, Method::LcdrWoLc];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lcdr => "lcdr",
            Method::Mf => "mf",
            Method::MfWf => "mf_wf",
            Method::VaeIvaeConcat => "vae_ivae_concat",
            Method::LcdrWoLc => "lcdr_wo_lc",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method '{s}'")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stage-one outputs a variant may draw its features from.
#[derive(Debug, Clone, Default)]
pub struct StageArtifacts {
    /// Constrained representation (trained with the configured λ).
    pub z_lc: Option<FeatureTable>,
    /// Exposure-VAE representation trained without alignment.
    pub z_vae: Option<FeatureTable>,
    /// iVAE posterior means.
    pub z_ivae: Option<FeatureTable>,
    pub proxies: Option<FeatureTable>,
}

fn need<'a>(t: &'a Option<FeatureTable>, what: &str, kind: Method) -> Result<&'a FeatureTable> {
    t.as_ref()
        .ok_or_else(|| Error::config(format!("method {kind} needs the {what} representation")))
}

/// Feature table the head sees for each method (`None` for plain MF).
pub fn variant_features(kind: Method, artifacts: &StageArtifacts) -> Result<Option<FeatureTable>> {
    Ok(match kind {
        Method::Mf => None,
        Method::Lcdr => Some(need(&artifacts.z_lc, "constrained", kind)?.clone()),
        Method::LcdrWoLc => Some(need(&artifacts.z_vae, "unconstrained VAE", kind)?.clone()),
        Method::MfWf => Some(need(&artifacts.proxies, "proxy", kind)?.clone()),
        Method::VaeIvaeConcat => {
            let a = need(&artifacts.z_vae, "unconstrained VAE", kind)?;
            let b = need(&artifacts.z_ivae, "iVAE", kind)?;
            Some(a.concat(b)?)
        }
    })
}

pub fn baseline_variant(
    kind: Method,
    dataset: &InteractionDataset,
    artifacts: &StageArtifacts,
    config: &RecConfig,
) -> Result<(Recommender, RecLog)> {
    let features = variant_features(kind, artifacts)?;
    train_recommender(dataset, features.as_ref(), config)
}

/// `user<TAB>item<TAB>score` for every record of `split`.
pub fn write_scores_tsv(rec: &Recommender, dataset: &InteractionDataset, split: Split, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in dataset.split_records(split) {
        let s = rec.score(r.user, r.item)?;
        writeln!(w, "{}\t{}\t{}", r.user, r.item, s).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
