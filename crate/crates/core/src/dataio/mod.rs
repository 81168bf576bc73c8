//! Dataset ingestion, binarization, the biased/unbiased split protocol and
//! per-user exposure / proxy vectors.

mod canonical;
mod coat;
mod kuairand;
mod proxies;
mod triples;

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub use canonical::{read_canonical, sha256_hex, write_canonical, Manifest, CANONICAL_HEADER};
pub use kuairand::KuaiRandSchema;
pub use proxies::{encode_proxies, EncodedProxies, FeatureKind, FeatureSpec, ProxySchema, RawUserFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Biased,
    Unbiased,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Biased => "biased",
            Origin::Unbiased => "unbiased",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split '{other}'"))),
        }
    }
}

/// How raw feedback values map onto binary labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ValueKind {
    /// Explicit ratings; positive when `value >= threshold`.
    Rating { threshold: f64 },
    /// Click indicator; positive when `value == 1`.
    Click,
}

pub const DEFAULT_RATING_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: usize,
    pub item: usize,
    pub value: f64,
    pub label: u8,
    pub origin: Origin,
    /// Biased records are always `Train`; unbiased ones are `None` until split.
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyRow {
    pub user: usize,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExposureRow {
    pub user: usize,
    pub a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub records: Vec<InteractionRecord>,
    /// One row per user, all of width `proxy_width`.
    pub proxies: Vec<ProxyRow>,
    pub proxy_width: usize,
    pub value_kind: ValueKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    Coat,
    Triples,
    KuaiRand,
    Canonical,
}

impl std::str::FromStr for SourceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coat" => Ok(Self::Coat),
            "triples" | "yahoo" => Ok(Self::Triples),
            "kuairand" => Ok(Self::KuaiRand),
            "canonical" => Ok(Self::Canonical),
            other => Err(Error::config(format!("unknown dataset format '{other}'"))),
        }
    }
}

/// Optional declared cardinalities for sources that do not carry them.
#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    pub num_users: Option<usize>,
    pub num_items: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    /// Repeated (user, item, origin) entries dropped in favour of the last one.
    pub duplicates: usize,
    pub unknown_categories: usize,
    pub missing_feature_values: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: InteractionDataset,
    pub report: IngestReport,
}

pub fn ingest(format: SourceFormat, path: &Path) -> Result<Ingested> {
    ingest_with(format, path, IngestOptions::default())
}

pub fn ingest_with(format: SourceFormat, path: &Path, opts: IngestOptions) -> Result<Ingested> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ));
    }
    match format {
        SourceFormat::Coat => coat::ingest(path),
        SourceFormat::Triples => triples::ingest(path, opts),
        SourceFormat::KuaiRand => kuairand::ingest(path),
        SourceFormat::Canonical => Ok(Ingested {
            dataset: read_canonical(path)?,
            report: IngestReport::default(),
        }),
    }
}

/// Raw (user, item, value, origin) tuple before dedup.
pub(crate) struct RawRecord {
    pub user: usize,
    pub item: usize,
    pub value: f64,
    pub origin: Origin,
}

/// Applies last-wins dedup on (user, item, origin), preserving first-seen order.
pub(crate) fn assemble_records(raw: Vec<RawRecord>, report: &mut IngestReport) -> Vec<InteractionRecord> {
    let mut index: HashMap<(usize, usize, Origin), usize> = HashMap::new();
    let mut out: Vec<InteractionRecord> = Vec::with_capacity(raw.len());
    for r in raw {
        let rec = InteractionRecord {
            user: r.user,
            item: r.item,
            value: r.value,
            label: 0,
            origin: r.origin,
            split: match r.origin {
                Origin::Biased => Some(Split::Train),
                Origin::Unbiased => None,
            },
        };
        match index.get(&(r.user, r.item, r.origin)) {
            Some(&pos) => {
                report.duplicates += 1;
                out[pos] = rec;
            }
            None => {
                index.insert((r.user, r.item, r.origin), out.len());
                out.push(rec);
            }
        }
    }
    if report.duplicates > 0 {
        report
            .warnings
            .push(format!("{} duplicate (user, item, origin) entries; kept the last", report.duplicates));
    }
    out
}

pub(crate) fn empty_proxies(num_users: usize) -> Vec<ProxyRow> {
    (0..num_users).map(|user| ProxyRow { user, w: Vec::new() }).collect()
}

impl InteractionDataset {
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.user >= self.num_users || r.item >= self.num_items {
                return Err(Error::Lookup(format!(
                    "record {i} ({}, {}) outside {}x{}",
                    r.user, r.item, self.num_users, self.num_items
                )));
            }
            if r.label > 1 {
                return Err(Error::config(format!("record {i} has non-binary label")));
            }
            match (r.origin, r.split) {
                (Origin::Biased, Some(Split::Train)) | (Origin::Unbiased, None) => {}
                (Origin::Unbiased, Some(Split::Val | Split::Test)) => {}
                (o, s) => {
                    return Err(Error::Split(format!("record {i}: origin {o:?} cannot be in split {s:?}")))
                }
            }
        }
        if self.proxies.len() != self.num_users {
            return Err(Error::config("need exactly one proxy row per user"));
        }
        if self.proxies.iter().any(|p| p.w.len() != self.proxy_width) {
            return Err(Error::config("proxy rows must share one width"));
        }
        Ok(())
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.records.iter().filter(|r| r.origin == origin).count()
    }

    pub fn count_split(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == Some(split)).count()
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &InteractionRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    /// `(item, label)` pairs per user for one split, in record order.
    pub fn items_by_user(&self, split: Split) -> Vec<Vec<(usize, u8)>> {
        let mut out = vec![Vec::new(); self.num_users];
        for r in self.split_records(split) {
            out[r.user].push((r.item, r.label));
        }
        out
    }

    pub fn proxy_matrix(&self) -> Vec<Vec<f64>> {
        self.proxies.iter().map(|p| p.w.clone()).collect()
    }
}

/// Sets `label` from `value`: ratings use `value >= rating_threshold`, click
/// data uses `value == 1`. Raw values are kept.
pub fn binarize(mut dataset: InteractionDataset, rating_threshold: f64) -> InteractionDataset {
    if let ValueKind::Rating { .. } = dataset.value_kind {
        dataset.value_kind = ValueKind::Rating {
            threshold: rating_threshold,
        };
    }
    let kind = dataset.value_kind;
    for r in &mut dataset.records {
        r.label = label_for(kind, r.value);
    }
    dataset
}

pub fn label_for(kind: ValueKind, value: f64) -> u8 {
    let positive = match kind {
        ValueKind::Rating { threshold } => value >= threshold,
        ValueKind::Click => value == 1.0,
    };
    positive as u8
}

/// Uniform per-record assignment of unbiased records: `round(val_fraction · n)`
/// go to validation, the rest to test. Biased records stay in train.
pub fn split(mut dataset: InteractionDataset, val_fraction: f64, seed: u64) -> Result<InteractionDataset> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let mut unbiased: Vec<usize> = dataset
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.origin == Origin::Unbiased)
        .map(|(i, _)| i)
        .collect();
    if unbiased.is_empty() {
        return Err(Error::Split("dataset has no unbiased records to split".into()));
    }
    let n_val = (val_fraction * unbiased.len() as f64).round() as usize;
    unbiased.shuffle(&mut stream(seed, Stream::Split));
    for (rank, &idx) in unbiased.iter().enumerate() {
        dataset.records[idx].split = Some(if rank < n_val { Split::Val } else { Split::Test });
    }
    for r in &mut dataset.records {
        if r.origin == Origin::Biased {
            r.split = Some(Split::Train);
        }
    }
    Ok(dataset)
}

/// One row per user with `a_ui = 1` iff a biased record (u, i) exists.
pub fn build_exposure(dataset: &InteractionDataset) -> Vec<ExposureRow> {
    let mut rows: Vec<ExposureRow> = (0..dataset.num_users)
        .map(|user| ExposureRow {
            user,
            a: vec![0.0; dataset.num_items],
        })
        .collect();
    for r in &dataset.records {
        if r.origin == Origin::Biased {
            rows[r.user].a[r.item] = 1.0;
        }
    }
    rows
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn toy(records: &[(usize, usize, f64, Origin)], users: usize, items: usize) -> InteractionDataset {
        let mut report = IngestReport::default();
        let raw = records
            .iter()
            .map(|&(user, item, value, origin)| RawRecord { user, item, value, origin })
            .collect();
        let records = assemble_records(raw, &mut report);
        InteractionDataset {
            num_users: users,
            num_items: items,
            records,
            proxies: empty_proxies(users),
            proxy_width: 0,
            value_kind: ValueKind::Rating { threshold: 4.0 },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::toy;
    use super::*;

    fn sample() -> InteractionDataset {
        toy(
            &[
                (0, 2, 5.0, Origin::Biased),
                (0, 5, 3.0, Origin::Biased),
                (1, 1, 4.0, Origin::Biased),
                (0, 0, 2.0, Origin::Unbiased),
                (1, 3, 4.0, Origin::Unbiased),
                (2, 4, 1.0, Origin::Unbiased),
                (2, 5, 5.0, Origin::Unbiased),
            ],
            3,
            6,
        )
    }

    #[test]
    fn binarize_threshold_and_click() {
        let d = binarize(sample(), 4.0);
        let labels: Vec<u8> = d.records.iter().map(|r| r.label).collect();
        assert_eq!(labels, vec![1, 0, 1, 0, 1, 0, 1]);
        assert_eq!(d.records[1].value, 3.0);
        assert_eq!(label_for(ValueKind::Click, 1.0), 1);
        assert_eq!(label_for(ValueKind::Click, 0.0), 0);
    }

    #[test]
    fn exposure_rows() {
        let rows = build_exposure(&sample());
        assert_eq!(rows[0].a, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(rows[2].a, vec![0.0; 6]);
        let ones: f64 = rows.iter().flat_map(|r| r.a.iter()).sum();
        assert_eq!(ones as usize, 3);
    }

    #[test]
    fn split_counts_and_determinism() {
        let a = split(sample(), 0.5, 3).unwrap();
        let b = split(sample(), 0.5, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count_split(Split::Val), 2);
        assert_eq!(a.count_split(Split::Test), 2);
        assert_eq!(a.count_split(Split::Train), 3);
        a.validate().unwrap();
    }

    #[test]
    fn split_errors() {
        assert!(split(sample(), 0.0, 1).is_err());
        assert!(split(sample(), 1.0, 1).is_err());
        let only_biased = toy(&[(0, 0, 4.0, Origin::Biased)], 1, 1);
        assert!(matches!(split(only_biased, 0.3, 1), Err(Error::Split(_))));
    }

    #[test]
    fn duplicates_keep_last() {
        let d = toy(
            &[(0, 0, 1.0, Origin::Biased), (0, 0, 5.0, Origin::Biased), (0, 0, 2.0, Origin::Unbiased)],
            1,
            1,
        );
        assert_eq!(d.records.len(), 2);
        assert_eq!(d.records[0].value, 5.0);
    }
}
