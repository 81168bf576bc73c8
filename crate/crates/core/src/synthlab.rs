//! Synthetic confounded data with known latent confounders and a
//! proxy-quality dial, plus an affine-alignment score for recovered latents.
//!
//! Each latent dimension has one categorical proxy factor. Users draw a
//! class per factor, and the confounder for that dimension is Gaussian around
//! a class-specific mean. Exposure and feedback both depend on the confounder,
//! so the biased train data is confounded while the uniformly exposed test
//! data is not.

use std::io::Write;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{InteractionDataset, InteractionRecord, Origin, ProxyRow, Split, ValueKind};
use crate::error::{Error, Result};
use crate::numkernel::{dot, sigmoid};
use crate::rng::{stream, Stream};

/// Ratio `SS_res / SS_tot` below which a fit counts as exact.
pub const EXACT_FIT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim_true: usize,
    /// Probability that a proxy factor is replaced by an independent draw.
    pub proxy_noise: f64,
    /// Target mean of the biased exposure matrix.
    pub exposure_sparsity: f64,
    pub num_classes: usize,
    /// Distance between neighbouring class means, in units of `within_class_std`.
    pub class_spacing: f64,
    pub within_class_std: f64,
    /// Standard deviation of the per-item exposure loadings `v_i`.
    pub exposure_scale: f64,
    /// Standard deviation of the per-item exposure offsets.
    pub item_popularity_std: f64,
    pub pref_dim: usize,
    /// Scale of the confounder-free preference term `θ_uᵀ e_i`.
    pub pref_scale: f64,
    /// Scale of the confounder term `zᵀ g_i` in the feedback logit.
    pub confounder_scale: f64,
    pub label_offset: f64,
    /// Uniformly drawn (unbiased) items per user.
    pub unbiased_per_user: usize,
    /// User factors that drive exposure but not feedback.
    pub nuisance_dim: usize,
    /// Standard deviation of the per-item loadings on the nuisance factors.
    pub nuisance_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 1000,
            num_items: 200,
            latent_dim_true: 2,
            proxy_noise: 0.0,
            exposure_sparsity: 0.1,
            num_classes: 8,
            class_spacing: 2.5,
            within_class_std: 0.25,
            exposure_scale: 1.5,
            item_popularity_std: 0.5,
            pref_dim: 4,
            pref_scale: 1.0,
            confounder_scale: 1.5,
            label_offset: 0.0,
            unbiased_per_user: 10,
            nuisance_dim: 0,
            nuisance_scale: 1.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(format!("synth config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 || self.latent_dim_true == 0 {
            return Err(Error::config("num_users, num_items and latent_dim_true must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.proxy_noise) {
            return Err(Error::config(format!("proxy_noise must lie in [0, 1], got {}", self.proxy_noise)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if !(self.class_spacing >= 2.0) {
            return Err(Error::config("class_spacing must be at least 2 standard deviations"));
        }
        if !(self.within_class_std > 0.0) {
            return Err(Error::config("within_class_std must be positive"));
        }
        if self.unbiased_per_user > self.num_items {
            return Err(Error::config("unbiased_per_user exceeds num_items"));
        }
        for (name, v) in [
            ("exposure_scale", self.exposure_scale),
            ("item_popularity_std", self.item_popularity_std),
            ("pref_scale", self.pref_scale),
            ("confounder_scale", self.confounder_scale),
            ("nuisance_scale", self.nuisance_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn class_mean(&self, class: usize) -> f64 {
        let centre = (self.num_classes - 1) as f64 / 2.0;
        self.class_spacing * self.within_class_std * (class as f64 - centre)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub z_true: Vec<Vec<f64>>,
    /// Class index per user and factor before corruption.
    pub class_clean: Vec<Vec<usize>>,
    pub class_observed: Vec<Vec<usize>>,
    /// One-hot encodings of the two class tables.
    pub w_clean: Vec<Vec<f64>>,
    pub w_observed: Vec<Vec<f64>>,
    /// Offset that met the exposure target.
    pub exposure_offset: f64,
}

fn one_hot(classes: &[usize], k: usize) -> Vec<f64> {
    let mut w = vec![0.0; classes.len() * k];
    for (f, &c) in classes.iter().enumerate() {
        w[f * k + c] = 1.0;
    }
    w
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let d = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Offset `c` with `mean σ(logit + c) = target`, found by bisection.
pub fn calibrate_offset(logits: &[f64], target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Calibration(format!("exposure target {target} is outside (0, 1)")));
    }
    let mean_at = |c: f64| logits.iter().map(|l| sigmoid(l + c)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    if mean_at(lo) > target || mean_at(hi) < target {
        return Err(Error::Calibration(format!("exposure target {target} cannot be reached")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    let achieved = mean_at(c);
    if (achieved - target).abs() > 1e-9 {
        return Err(Error::Calibration(format!(
            "exposure target {target} missed: reached {achieved}"
        )));
    }
    Ok(c)
}

/// Draws a confounded dataset. Records are unsplit; unbiased records carry
/// no split until [`crate::dataio::split`] is applied.
pub fn generate(config: &SynthConfig) -> Result<(InteractionDataset, GroundTruth)> {
    config.validate()?;
    let mut rng = stream(config.seed, Stream::Synth);
    let (nu, ni, l, k) = (config.num_users, config.num_items, config.latent_dim_true, config.num_classes);

    let class_clean: Vec<Vec<usize>> = (0..nu).map(|_| (0..l).map(|_| rng.random_range(0..k)).collect()).collect();
    let noise = Normal::new(0.0, config.within_class_std).expect("validated");
    let z_true: Vec<Vec<f64>> = class_clean
        .iter()
        .map(|cs| cs.iter().map(|&c| config.class_mean(c) + noise.sample(&mut rng)).collect())
        .collect();
    let class_observed: Vec<Vec<usize>> = class_clean
        .iter()
        .map(|cs| {
            cs.iter()
                .map(|&c| {
                    if rng.random::<f64>() < config.proxy_noise {
                        rng.random_range(0..k)
                    } else {
                        c
                    }
                })
                .collect()
        })
        .collect();

    let v: Vec<Vec<f64>> = (0..ni).map(|_| normal_vec(&mut rng, l, config.exposure_scale)).collect();
    let pop = normal_vec(&mut rng, ni, config.item_popularity_std);
    let theta: Vec<Vec<f64>> = (0..nu)
        .map(|_| normal_vec(&mut rng, config.pref_dim, config.pref_scale / (config.pref_dim.max(1) as f64).sqrt()))
        .collect();
    let e: Vec<Vec<f64>> = (0..ni).map(|_| normal_vec(&mut rng, config.pref_dim, 1.0)).collect();
    let g: Vec<Vec<f64>> = (0..ni)
        .map(|_| normal_vec(&mut rng, l, config.confounder_scale / (l as f64).sqrt()))
        .collect();

    let nuisance: Vec<Vec<f64>> = (0..nu).map(|_| normal_vec(&mut rng, config.nuisance_dim, 1.0)).collect();
    let m: Vec<Vec<f64>> = (0..ni)
        .map(|_| normal_vec(&mut rng, config.nuisance_dim, config.nuisance_scale))
        .collect();

    let mut logits = Vec::with_capacity(nu * ni);
    for (z, n) in z_true.iter().zip(&nuisance) {
        for i in 0..ni {
            logits.push(dot(z, &v[i]) + dot(n, &m[i]) + pop[i]);
        }
    }
    let offset = calibrate_offset(&logits, config.exposure_sparsity)?;

    // one potential outcome per (user, item), shared by both data sources
    let mut labels = vec![0u8; nu * ni];
    for u in 0..nu {
        for i in 0..ni {
            let p = sigmoid(dot(&theta[u], &e[i]) + dot(&z_true[u], &g[i]) + config.label_offset);
            labels[u * ni + i] = u8::from(rng.random::<f64>() < p);
        }
    }

    let mut records = Vec::new();
    for u in 0..nu {
        for i in 0..ni {
            if rng.random::<f64>() < sigmoid(logits[u * ni + i] + offset) {
                records.push(record(u, i, labels[u * ni + i], Origin::Biased));
            }
        }
    }
    for u in 0..nu {
        let mut items = sample(&mut rng, ni, config.unbiased_per_user).into_vec();
        items.sort_unstable();
        for i in items {
            records.push(record(u, i, labels[u * ni + i], Origin::Unbiased));
        }
    }

    let w_clean: Vec<Vec<f64>> = class_clean.iter().map(|c| one_hot(c, k)).collect();
    let w_observed: Vec<Vec<f64>> = class_observed.iter().map(|c| one_hot(c, k)).collect();
    let dataset = InteractionDataset {
        num_users: nu,
        num_items: ni,
        records,
        proxies: w_observed
            .iter()
            .enumerate()
            .map(|(user, w)| ProxyRow { user, w: w.clone() })
            .collect(),
        proxy_width: l * k,
        value_kind: ValueKind::Click,
    };
    dataset.validate()?;
    Ok((
        dataset,
        GroundTruth {
            z_true,
            class_clean,
            class_observed,
            w_clean,
            w_observed,
            exposure_offset: offset,
        },
    ))
}

fn record(user: usize, item: usize, label: u8, origin: Origin) -> InteractionRecord {
    InteractionRecord {
        user,
        item,
        value: f64::from(label),
        label,
        origin,
        split: match origin {
            Origin::Biased => Some(Split::Train),
            Origin::Unbiased => None,
        },
    }
}

/// Mean over true dimensions of the R² of a least-squares affine map from
/// `z_recovered` to that dimension of `z_true`.
pub fn alignment_score(z_recovered: &[Vec<f64>], z_true: &[Vec<f64>]) -> Result<f64> {
    let n = z_true.len();
    if z_recovered.len() != n {
        return Err(Error::config(format!(
            "alignment needs equal user counts ({} vs {n})",
            z_recovered.len()
        )));
    }
    let dr = z_recovered.first().map_or(0, Vec::len);
    let dt = z_true.first().map_or(0, Vec::len);
    if n < 2 || dr == 0 || dt == 0 {
        return Err(Error::config("alignment needs at least two users and non-empty vectors"));
    }
    if z_recovered.iter().any(|r| r.len() != dr) || z_true.iter().any(|r| r.len() != dt) {
        return Err(Error::config("ragged latent rows"));
    }
    let x = DMatrix::from_fn(n, dr + 1, |r, c| if c == dr { 1.0 } else { z_recovered[r][c] });
    let y = DMatrix::from_fn(n, dt, |r, c| z_true[r][c]);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (n.max(dr + 1) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < dr + 1 {
        warn!("recovered latents are rank deficient ({rank} of {}); using the pseudo-inverse", dr + 1);
    }
    let beta = svd.solve(&y, tol).map_err(|e| Error::Numerical(e.to_string()))?;
    let fitted = &x * beta;
    let mut total = 0.0;
    for j in 0..dt {
        let col = y.column(j);
        let mean = col.mean();
        let ss_tot: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
        if ss_tot == 0.0 {
            return Err(Error::config(format!("true dimension {j} is constant")));
        }
        let ss_res: f64 = col.iter().zip(fitted.column(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let ratio = ss_res / ss_tot;
        let ratio = if ratio < EXACT_FIT_FLOOR { 0.0 } else { ratio };
        total += (1.0 - ratio).clamp(0.0, 1.0);
    }
    Ok(total / dt as f64)
}

/// `user<TAB>z1,z2,...`, one line per user.
pub fn write_ground_truth_tsv(truth: &GroundTruth, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (u, z) in truth.z_true.iter().enumerate() {
        let cells: Vec<String> = z.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{u}\t{}", cells.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ground_truth_tsv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let (u, zs) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, n + 1, "expected user<TAB>values"))?;
        let u: usize = u.parse().map_err(|_| Error::parse(path, n + 1, "bad user id"))?;
        if u != rows.len() {
            return Err(Error::parse(path, n + 1, "users must be listed in order"));
        }
        let z = zs
            .split(',')
            .map(|s| s.parse::<f64>().map_err(|_| Error::parse(path, n + 1, format!("bad value '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(z);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64, rho: f64) -> SynthConfig {
        SynthConfig {
            num_users: 300,
            num_items: 40,
            proxy_noise: rho,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let (a, ta) = generate(&small(3, 0.3)).unwrap();
        let (b, tb) = generate(&small(3, 0.3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&small(4, 0.3)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn clean_dial_keeps_proxies() {
        let (d, t) = generate(&small(0, 0.0)).unwrap();
        assert_eq!(t.w_observed, t.w_clean);
        assert_eq!(d.proxy_matrix(), t.w_clean);
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn full_noise_decouples_proxies() {
        let cfg = SynthConfig { num_users: 2000, num_items: 20, proxy_noise: 1.0, ..SynthConfig::default() };
        let (_, t) = generate(&cfg).unwrap();
        let bound = 3.0 / (cfg.num_users as f64).sqrt();
        for f in 0..cfg.latent_dim_true {
            let w: Vec<f64> = t.class_observed.iter().map(|c| c[f] as f64).collect();
            let z: Vec<f64> = t.z_true.iter().map(|z| z[f]).collect();
            assert!(corr(&w, &z).abs() < bound, "factor {f}");
        }
        let clean: Vec<f64> = t.class_clean.iter().map(|c| c[0] as f64).collect();
        let z: Vec<f64> = t.z_true.iter().map(|z| z[0]).collect();
        assert!(corr(&clean, &z) > 0.9);
    }

    #[test]
    fn exposure_meets_target_and_unbiased_is_uniform_count() {
        let cfg = small(1, 0.0);
        let (d, t) = generate(&cfg).unwrap();
        let density = d.count(Origin::Biased) as f64 / (cfg.num_users * cfg.num_items) as f64;
        assert!((density - cfg.exposure_sparsity).abs() < 0.01, "{density}");
        assert_eq!(d.count(Origin::Unbiased), cfg.num_users * cfg.unbiased_per_user);
        assert!(t.exposure_offset.is_finite());
    }

    #[test]
    fn class_means_are_separated() {
        let cfg = SynthConfig::default();
        for c in 1..cfg.num_classes {
            assert!(cfg.class_mean(c) - cfg.class_mean(c - 1) >= 2.0 * cfg.within_class_std);
        }
    }

    #[test]
    fn calibration_errors() {
        assert!(matches!(calibrate_offset(&[0.0, 1.0], 0.0), Err(Error::Calibration(_))));
        assert!(matches!(calibrate_offset(&[0.0, 1.0], 1.0), Err(Error::Calibration(_))));
        let c = calibrate_offset(&[0.0, 0.0], 0.5).unwrap();
        assert!(c.abs() < 1e-9);
        let cfg = SynthConfig { exposure_sparsity: 1.5, ..small(0, 0.0) };
        assert!(matches!(generate(&cfg), Err(Error::Calibration(_))));
    }

    #[test]
    fn config_rejects_bad_dial() {
        assert!(SynthConfig { proxy_noise: 1.5, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig::from_toml("num_users = 10\nbogus = 1\n").is_err());
        let c = SynthConfig::from_toml("num_users = 10\nproxy_noise = 0.25\n").unwrap();
        assert_eq!((c.num_users, c.proxy_noise, c.num_items), (10, 0.25, 200));
    }

    #[test]
    fn alignment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z: Vec<Vec<f64>> = (0..600).map(|_| normal_vec(&mut rng, 2, 1.0)).collect();
        assert_eq!(alignment_score(&z, &z).unwrap(), 1.0);
        let scaled: Vec<Vec<f64>> = z.iter().map(|r| r.iter().map(|v| 2.0 * v + 3.0).collect()).collect();
        assert_eq!(alignment_score(&scaled, &z).unwrap(), 1.0);
        let other: Vec<Vec<f64>> = (0..600).map(|_| normal_vec(&mut rng, 2, 1.0)).collect();
        assert!(alignment_score(&other, &z).unwrap() < 0.1);
    }

    #[test]
    fn alignment_handles_rank_deficiency() {
        let z: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
        let dup: Vec<Vec<f64>> = z.iter().map(|r| vec![r[0], r[0], r[1]]).collect();
        assert_eq!(alignment_score(&dup, &z).unwrap(), 1.0);
        assert!(alignment_score(&z[..10], &z).is_err());
    }

    #[test]
    fn ground_truth_round_trip() {
        let (_, t) = generate(&small(2, 0.5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("truth.tsv");
        write_ground_truth_tsv(&t, &p).unwrap();
        assert_eq!(read_ground_truth_tsv(&p).unwrap(), t.z_true);
    }
}
