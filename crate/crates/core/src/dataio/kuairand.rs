//! KuaiRand-style click logs in CSV, described by a TOML schema file.
//!
//! ```toml
//! biased = "log_standard.csv"
//! unbiased = "log_random.csv"
//! user_features = "user_features.csv"   # optional
//! user_column = "user_id"
//! item_column = "video_id"
//! click_column = "is_click"
//! feature_columns = []                   # empty: every low-cardinality column
//! max_categories = 64
//! ```
//!
//! Relative paths resolve against the schema file's directory.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::proxies::{encode_proxies, ProxySchema, RawUserFeatures};
use super::{assemble_records, empty_proxies, InteractionDataset, Ingested, IngestReport, Origin, RawRecord, ValueKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
pub struct KuaiRandSchema {
    pub biased: PathBuf,
    pub unbiased: Option<PathBuf>,
    pub user_features: Option<PathBuf>,
    #[serde(default = "default_user")]
    pub user_column: String,
    #[serde(default = "default_item")]
    pub item_column: String,
    #[serde(default = "default_click")]
    pub click_column: String,
    #[serde(default)]
    pub feature_columns: Vec<String>,
    #[serde(default = "default_max_categories")]
    pub max_categories: usize,
}

fn default_user() -> String {
    "user_id".into()
}
fn default_item() -> String {
    "video_id".into()
}
fn default_click() -> String {
    "is_click".into()
}
fn default_max_categories() -> usize {
    64
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::parse(path, 1, format!("missing column '{name}'")))
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map_or(0, |p| p.line() as usize)
}

fn read_log(path: &Path, schema: &KuaiRandSchema, origin: Origin, out: &mut Vec<(String, String, f64, Origin)>) -> Result<()> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?.clone();
    let (cu, ci, cc) = (
        column(&headers, &schema.user_column, path)?,
        column(&headers, &schema.item_column, path)?,
        column(&headers, &schema.click_column, path)?,
    );
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        let click: f64 = rec[cc]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line_of(&rec), "click value is not numeric"))?;
        out.push((rec[cu].trim().to_string(), rec[ci].trim().to_string(), click, origin));
    }
    Ok(())
}

/// Sorts ids numerically when all parse as integers, lexicographically otherwise.
fn dense(ids: BTreeSet<String>) -> HashMap<String, usize> {
    let mut v: Vec<String> = ids.into_iter().collect();
    if v.iter().all(|s| s.parse::<i64>().is_ok()) {
        v.sort_by_key(|s| s.parse::<i64>().unwrap());
    }
    v.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
}

pub(super) fn ingest(schema_path: &Path) -> Result<Ingested> {
    let text = fs::read_to_string(schema_path).map_err(|e| Error::io(schema_path, e))?;
    let schema: KuaiRandSchema =
        toml::from_str(&text).map_err(|e| Error::parse(schema_path, 0, e.to_string()))?;
    let base = schema_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let mut logs = Vec::new();
    read_log(&resolve(&schema.biased), &schema, Origin::Biased, &mut logs)?;
    if let Some(u) = &schema.unbiased {
        read_log(&resolve(u), &schema, Origin::Unbiased, &mut logs)?;
    }
    let users = dense(logs.iter().map(|l| l.0.clone()).collect());
    let items = dense(logs.iter().map(|l| l.1.clone()).collect());
    let raw = logs
        .into_iter()
        .map(|(u, i, value, origin)| RawRecord { user: users[&u], item: items[&i], value, origin })
        .collect();
    let mut report = IngestReport::default();
    let records = assemble_records(raw, &mut report);
    let num_users = users.len();

    let (proxies, proxy_width) = match &schema.user_features {
        None => (empty_proxies(num_users), 0),
        Some(p) => {
            let path = resolve(p);
            let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::parse(&path, 0, e.to_string()))?;
            let headers = rdr.headers().map_err(|e| Error::parse(&path, 1, e.to_string()))?.clone();
            let cu = column(&headers, &schema.user_column, &path)?;
            let names: Vec<String> = headers.iter().map(str::to_string).collect();
            let mut rows: Vec<Vec<Option<String>>> = vec![vec![None; names.len()]; num_users];
            for rec in rdr.records() {
                let rec = rec.map_err(|e| Error::parse(&path, 0, e.to_string()))?;
                if let Some(&u) = users.get(rec[cu].trim()) {
                    rows[u] = rec
                        .iter()
                        .map(|v| {
                            let v = v.trim();
                            (!v.is_empty()).then(|| v.to_string())
                        })
                        .collect();
                }
            }
            let raw_features = RawUserFeatures { names: names.clone(), rows };
            let columns: Vec<String> = if schema.feature_columns.is_empty() {
                names
                    .iter()
                    .enumerate()
                    .filter(|(j, n)| {
                        if *j == cu || **n == schema.user_column {
                            return false;
                        }
                        let distinct: BTreeSet<&str> =
                            raw_features.rows.iter().filter_map(|r| r[*j].as_deref()).collect();
                        !distinct.is_empty() && distinct.len() <= schema.max_categories
                    })
                    .map(|(_, n)| n.clone())
                    .collect()
            } else {
                schema.feature_columns.clone()
            };
            let proxy_schema = ProxySchema::infer(&raw_features, &columns)?;
            let enc = encode_proxies(&raw_features, &proxy_schema)?;
            report.unknown_categories += enc.unknown_categories;
            report.missing_feature_values += enc.missing_values;
            (enc.rows, enc.width)
        }
    };

    let dataset = InteractionDataset {
        num_users,
        num_items: items.len(),
        records,
        proxies,
        proxy_width,
        value_kind: ValueKind::Click,
    };
    dataset.validate()?;
    Ok(Ingested { dataset, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::binarize;

    #[test]
    fn reads_logs_and_features() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        fs::write(d.join("std.csv"), "user_id,video_id,is_click,time\n10,7,1,0\n11,8,0,0\n10,8,0,1\n").unwrap();
        fs::write(d.join("rand.csv"), "user_id,video_id,is_click,time\n11,7,1,0\n").unwrap();
        fs::write(d.join("users.csv"), "user_id,degree,followers\n10,high,123\n11,low,5\n").unwrap();
        fs::write(
            d.join("schema.toml"),
            "biased = \"std.csv\"\nunbiased = \"rand.csv\"\nuser_features = \"users.csv\"\nmax_categories = 1\nfeature_columns = [\"degree\"]\n",
        )
        .unwrap();
        let ing = ingest(&d.join("schema.toml")).unwrap();
        let ds = binarize(ing.dataset, 4.0);
        assert_eq!((ds.num_users, ds.num_items), (2, 2));
        assert_eq!(ds.count(Origin::Unbiased), 1);
        assert_eq!(ds.records[0].label, 1);
        assert_eq!(ds.proxy_width, 2);
        // degree categories sorted: high, low
        assert_eq!(ds.proxies[0].w, vec![1.0, 0.0]);
        assert_eq!(ds.proxies[1].w, vec![0.0, 1.0]);
    }

    #[test]
    fn missing_column_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        fs::write(d.join("std.csv"), "uid,video_id,is_click\n1,2,1\n").unwrap();
        fs::write(d.join("schema.toml"), "biased = \"std.csv\"\n").unwrap();
        assert!(matches!(ingest(&d.join("schema.toml")), Err(Error::Parse { .. })));
    }
}
