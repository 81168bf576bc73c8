//! One seed of one method, end to end: stage one as the method requires,
//! stage two, and evaluation on the validation and test splits.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::dataio::{InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::ivae::IvaeModel;
use crate::lcvae::LcvaeModel;
use crate::metrics::{evaluate, EvalResult, SeedMetrics};
use crate::recommender::{variant_features, train_recommender, FeatureTable, Method, RecConfig, RecLog, Recommender, StageArtifacts};
use crate::trainer::{extract_z, extract_zlc, train_with, Branches, EpochLog, StageOneData, TrainConfig};

/// Settings shared by every seed of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub recommender: RecConfig,
    pub k: usize,
    /// `(lr, weight_decay)` candidates for stage two; empty means use `recommender` as is.
    pub grid: Vec<(f64, f64)>,
}

impl From<&crate::config::RunConfig> for PipelineConfig {
    fn from(c: &crate::config::RunConfig) -> Self {
        let grid = if c.run.tune {
            c.run
                .lr_grid
                .iter()
                .flat_map(|&lr| c.run.wd_grid.iter().map(move |&wd| (lr, wd)))
                .collect()
        } else {
            Vec::new()
        };
        Self {
            train: c.train.clone(),
            recommender: c.recommender.clone(),
            k: c.run.k,
            grid,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub method: Method,
    pub seed: u64,
    pub val: EvalResult,
    pub test: EvalResult,
    pub stage_one_ms: f64,
    pub stage_two_ms: f64,
    pub stage_one_log: Vec<EpochLog>,
    pub rec_log: RecLog,
    /// Stage-two `(lr, weight_decay)` that was kept.
    pub chosen: (f64, f64),
    pub ivae: Option<IvaeModel>,
    pub lcvae: Option<LcvaeModel>,
    pub recommender: Recommender,
}

impl SeedOutcome {
    pub fn total_ms(&self) -> f64 {
        self.stage_one_ms + self.stage_two_ms
    }

    pub fn seed_metrics(&self) -> SeedMetrics {
        SeedMetrics {
            seed: self.seed,
            ndcg_at_k: self.test.ndcg,
            recall_at_k: self.test.recall,
            users_evaluated: self.test.users_evaluated,
            users_skipped: self.test.users_skipped,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageOneOutput {
    pub ivae: Option<IvaeModel>,
    pub lcvae: Option<LcvaeModel>,
    pub log: Vec<EpochLog>,
}

/// Stage-one training required by `method`, and the feature tables it yields.
pub fn stage_one(
    method: Method,
    dataset: &InteractionDataset,
    train: &TrainConfig,
) -> Result<(StageArtifacts, StageOneOutput)> {
    let data = StageOneData::from_dataset(dataset);
    let mut artifacts = StageArtifacts::default();
    let needs_proxies = matches!(method, Method::Lcdr | Method::VaeIvaeConcat | Method::MfWf);
    if needs_proxies && dataset.proxy_width == 0 {
        return Err(Error::config(format!("method {method} needs user proxy features")));
    }
    let branches = match method {
        Method::Mf => None,
        Method::MfWf => {
            artifacts.proxies = Some(FeatureTable::new(data.proxies.clone())?);
            None
        }
        Method::Lcdr => Some((Branches::Joint, train.lambda)),
        Method::LcdrWoLc => Some((Branches::PlainVae, 0.0)),
        // the iVAE trajectory does not depend on the second branch, and at
        // λ = 0 the second branch is the unconstrained VAE
        Method::VaeIvaeConcat => Some((Branches::Joint, 0.0)),
    };
    let Some((branches, lambda)) = branches else {
        return Ok((artifacts, StageOneOutput { ivae: None, lcvae: None, log: Vec::new() }));
    };
    let cfg = TrainConfig { lambda, ..train.clone() };
    let out = train_with(&data, &cfg, branches, &mut |_, _, _| {})?;
    if let Some(m) = &out.lcvae {
        let table = FeatureTable::new(extract_zlc(m, &data.exposure)?)?;
        if method == Method::Lcdr {
            artifacts.z_lc = Some(table);
        } else {
            artifacts.z_vae = Some(table);
        }
    }
    if let Some(m) = &out.ivae {
        artifacts.z_ivae = Some(FeatureTable::new(extract_z(m, &data.exposure, &data.proxies)?)?);
    }
    Ok((artifacts, StageOneOutput { ivae: out.ivae, lcvae: out.lcvae, log: out.log }))
}

/// Full pipeline for one seed.
pub fn run_seed(dataset: &InteractionDataset, method: Method, config: &PipelineConfig, seed: u64) -> Result<SeedOutcome> {
    let train = TrainConfig { seed, ..config.train.clone() };
    let t0 = Instant::now();
    let (artifacts, one) = stage_one(method, dataset, &train)?;
    let stage_one_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    let features = variant_features(method, &artifacts)?;
    let base = RecConfig { seed, k: config.k, ..config.recommender.clone() };
    let grid = if config.grid.is_empty() { vec![(base.lr, base.weight_decay)] } else { config.grid.clone() };
    let mut best: Option<(f64, (f64, f64), Recommender, RecLog, EvalResult)> = None;
    for &(lr, wd) in &grid {
        let cfg = RecConfig { lr, weight_decay: wd, ..base.clone() };
        let (rec, log) = train_recommender(dataset, features.as_ref(), &cfg)?;
        let val = evaluate(|u, i| rec.score(u, i).unwrap_or(f64::NEG_INFINITY), dataset, Split::Val, config.k)?;
        if best.as_ref().is_none_or(|b| val.ndcg > b.0) {
            best = Some((val.ndcg, (lr, wd), rec, log, val));
        }
    }
    let (_, chosen, recommender, rec_log, val) = best.expect("grid is non-empty");
    let test = evaluate(|u, i| recommender.score(u, i).unwrap_or(f64::NEG_INFINITY), dataset, Split::Test, config.k)?;
    let stage_two_ms = t1.elapsed().as_secs_f64() * 1e3;
    info!(
        "{method} seed {seed}: test ndcg@{} {:.4} recall {:.4} ({:.1}s)",
        config.k,
        test.ndcg,
        test.recall,
        (stage_one_ms + stage_two_ms) / 1e3
    );
    Ok(SeedOutcome {
        method,
        seed,
        val,
        test,
        stage_one_ms,
        stage_two_ms,
        stage_one_log: one.log,
        rec_log,
        chosen,
        ivae: one.ivae,
        lcvae: one.lcvae,
        recommender,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::split;
    use crate::synthlab::{generate, SynthConfig};

    fn tiny() -> InteractionDataset {
        let cfg = SynthConfig { num_users: 60, num_items: 30, exposure_sparsity: 0.2, unbiased_per_user: 6, ..SynthConfig::default() };
        split(generate(&cfg).unwrap().0, 0.3, 0).unwrap()
    }

    fn quick() -> PipelineConfig {
        PipelineConfig {
            train: TrainConfig { latent_dim: 2, hidden_dim: 8, epochs: 3, batch_size: 16, ..TrainConfig::default() },
            recommender: RecConfig { d_mf: 4, epochs: 3, ..RecConfig::default() },
            k: 5,
            grid: Vec::new(),
        }
    }

    #[test]
    fn every_method_runs() {
        let d = tiny();
        for m in Method::ALL {
            let out = run_seed(&d, m, &quick(), 1).unwrap();
            assert!((0.0..=1.0).contains(&out.test.ndcg), "{m}");
            match m {
                Method::Mf | Method::MfWf => assert!(out.stage_one_log.is_empty() && out.lcvae.is_none()),
                _ => assert_eq!(out.stage_one_log.len(), 3),
            }
            let width = out.recommender.features.as_ref().map(FeatureTable::width);
            let expected = match m {
                Method::Mf => None,
                Method::MfWf => Some(d.proxy_width),
                Method::VaeIvaeConcat => Some(4),
                _ => Some(2),
            };
            assert_eq!(width, expected, "{m}");
        }
    }

    #[test]
    fn lambda_zero_lcdr_equals_ablation() {
        let d = tiny();
        let mut cfg = quick();
        cfg.train.lambda = 0.0;
        let a = run_seed(&d, Method::Lcdr, &cfg, 2).unwrap();
        let b = run_seed(&d, Method::LcdrWoLc, &cfg, 2).unwrap();
        assert_eq!(a.lcvae, b.lcvae);
        assert_eq!(a.recommender, b.recommender);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn grid_picks_a_candidate() {
        let d = tiny();
        let mut cfg = quick();
        cfg.grid = vec![(1e-3, 1e-6), (1e-2, 1e-5)];
        let out = run_seed(&d, Method::Mf, &cfg, 0).unwrap();
        assert!(cfg.grid.contains(&out.chosen));
    }
}
