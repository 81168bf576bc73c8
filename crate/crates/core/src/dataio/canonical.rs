//! Canonical on-disk layout shared by every ingestion path:
//! `dataset.tsv`, `proxies.tsv` and `manifest.json` in one directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    label_for, InteractionDataset, InteractionRecord, IngestReport, Origin, ProxyRow, Split, ValueKind,
};
use crate::error::{Error, Result};

pub const CANONICAL_HEADER: &str = "user\titem\tvalue\torigin\tsplit";
pub const DATASET_FILE: &str = "dataset.tsv";
pub const PROXIES_FILE: &str = "proxies.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordCounts {
    pub biased: usize,
    pub unbiased: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub num_users: usize,
    pub num_items: usize,
    pub value_kind: ValueKind,
    pub proxy_width: usize,
    pub counts: RecordCounts,
    /// File name → SHA-256 hex digest.
    pub checksums: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ingest_report: Option<IngestReport>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, serde_json::Value>,
}

fn render_dataset(d: &InteractionDataset) -> Result<String> {
    let mut s = String::with_capacity(d.records.len() * 24);
    s.push_str(CANONICAL_HEADER);
    s.push('\n');
    for (i, r) in d.records.iter().enumerate() {
        let split = r
            .split
            .ok_or_else(|| Error::Split(format!("record {i} has no split assignment; run split first")))?;
        writeln!(s, "{}\t{}\t{}\t{}\t{}", r.user, r.item, r.value, r.origin.as_str(), split.as_str())
            .expect("writing to a String cannot fail");
    }
    Ok(s)
}

fn render_proxies(d: &InteractionDataset) -> String {
    let mut s = String::new();
    for p in &d.proxies {
        let cols: Vec<String> = p.w.iter().map(|v| v.to_string()).collect();
        writeln!(s, "{}\t{}", p.user, cols.join(",")).unwrap();
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the canonical files into `dir` (created if needed) and returns
/// the manifest that was written alongside them.
pub fn write_canonical(
    dir: &Path,
    dataset: &InteractionDataset,
    report: Option<&IngestReport>,
    provenance: BTreeMap<String, serde_json::Value>,
) -> Result<Manifest> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = render_dataset(dataset)?;
    let proxies = render_proxies(dataset);
    let dpath = dir.join(DATASET_FILE);
    let ppath = dir.join(PROXIES_FILE);
    fs::write(&dpath, &data).map_err(|e| Error::io(&dpath, e))?;
    fs::write(&ppath, &proxies).map_err(|e| Error::io(&ppath, e))?;

    let mut checksums = BTreeMap::new();
    checksums.insert(DATASET_FILE.to_string(), sha256_hex(data.as_bytes()));
    checksums.insert(PROXIES_FILE.to_string(), sha256_hex(proxies.as_bytes()));
    let manifest = Manifest {
        format_version: 1,
        num_users: dataset.num_users,
        num_items: dataset.num_items,
        value_kind: dataset.value_kind,
        proxy_width: dataset.proxy_width,
        counts: RecordCounts {
            biased: dataset.count(Origin::Biased),
            unbiased: dataset.count(Origin::Unbiased),
            train: dataset.count_split(Split::Train),
            val: dataset.count_split(Split::Val),
            test: dataset.count_split(Split::Test),
        },
        checksums,
        ingest_report: report.cloned(),
        provenance,
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(&mpath, e.line(), e.to_string()))
}

pub fn read_canonical(dir: &Path) -> Result<InteractionDataset> {
    let manifest = read_manifest(dir)?;
    let dpath = dir.join(DATASET_FILE);
    let text = fs::read_to_string(&dpath).map_err(|e| Error::io(&dpath, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CANONICAL_HEADER => {}
        _ => return Err(Error::parse(&dpath, 1, format!("expected header '{CANONICAL_HEADER}'"))),
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::parse(&dpath, lineno, format!("expected 5 fields, found {}", f.len())));
        }
        let bad = |what: &str| Error::parse(&dpath, lineno, format!("invalid {what}"));
        let user: usize = f[0].parse().map_err(|_| bad("user"))?;
        let item: usize = f[1].parse().map_err(|_| bad("item"))?;
        let value: f64 = f[2].parse().map_err(|_| bad("value"))?;
        let origin = match f[3] {
            "biased" => Origin::Biased,
            "unbiased" => Origin::Unbiased,
            _ => return Err(bad("origin")),
        };
        let split: Split = f[4].parse().map_err(|_| bad("split"))?;
        if user >= manifest.num_users || item >= manifest.num_items {
            return Err(Error::parse(&dpath, lineno, "id outside the declared user/item range"));
        }
        records.push(InteractionRecord {
            user,
            item,
            value,
            label: label_for(manifest.value_kind, value),
            origin,
            split: Some(split),
        });
    }

    let ppath = dir.join(PROXIES_FILE);
    let ptext = fs::read_to_string(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let mut proxies: Vec<Option<ProxyRow>> = vec![None; manifest.num_users];
    for (i, line) in ptext.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() || (lineno == 1 && line.starts_with("user\t")) {
            continue;
        }
        let (u, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(&ppath, lineno, "expected 'user<TAB>features'"))?;
        let user: usize = u.parse().map_err(|_| Error::parse(&ppath, lineno, "invalid user"))?;
        let w = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(&ppath, lineno, "invalid feature value"))?
        };
        if w.len() != manifest.proxy_width {
            return Err(Error::parse(&ppath, lineno, "proxy row width differs from the manifest"));
        }
        let slot = proxies
            .get_mut(user)
            .ok_or_else(|| Error::parse(&ppath, lineno, "user outside the declared range"))?;
        *slot = Some(ProxyRow { user, w });
    }
    let proxies = proxies
        .into_iter()
        .enumerate()
        .map(|(user, p)| p.unwrap_or(ProxyRow { user, w: vec![0.0; manifest.proxy_width] }))
        .collect();

    let dataset = InteractionDataset {
        num_users: manifest.num_users,
        num_items: manifest.num_items,
        records,
        proxies,
        proxy_width: manifest.proxy_width,
        value_kind: manifest.value_kind,
    };
    dataset.validate()?;
    Ok(dataset)
}
