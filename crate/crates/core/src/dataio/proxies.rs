//! One-hot encoding of user-side proxy features.
//!
//! Column order is deterministic: features sorted by name; within a
//! categorical feature, categories in declared order (or sorted, when the
//! schema is inferred from data).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ProxyRow;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    /// Passed through as a single 0/1 column.
    Binary,
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn width(&self) -> usize {
        match &self.kind {
            FeatureKind::Binary => 1,
            FeatureKind::Categorical { categories } => categories.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProxySchema {
    pub features: Vec<FeatureSpec>,
}

/// Raw per-user feature values, one row per dense user id. A `None`
/// entry is a missing value.
#[derive(Debug, Clone, Default)]
pub struct RawUserFeatures {
    pub names: Vec<String>,
    pub rows: Vec<Vec<Option<String>>>,
}

#[derive(Debug, Clone)]
pub struct EncodedProxies {
    pub rows: Vec<ProxyRow>,
    pub width: usize,
    pub unknown_categories: usize,
    pub missing_values: usize,
}

impl ProxySchema {
    /// Every named column becomes a categorical feature over its sorted
    /// distinct values.
    pub fn infer(raw: &RawUserFeatures, columns: &[String]) -> Result<Self> {
        let mut features = Vec::new();
        for name in columns {
            let col = raw
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::config(format!("feature column '{name}' not present")))?;
            let cats: BTreeSet<&str> = raw.rows.iter().filter_map(|r| r[col].as_deref()).collect();
            features.push(FeatureSpec {
                name: name.clone(),
                kind: FeatureKind::Categorical {
                    categories: cats.into_iter().map(str::to_string).collect(),
                },
            });
        }
        let mut s = Self { features };
        s.sort();
        Ok(s)
    }

    fn sort(&mut self) {
        self.features.sort_by(|a, b| a.name.cmp(&b.name));
    }

    pub fn width(&self) -> usize {
        self.features.iter().map(FeatureSpec::width).sum()
    }
}

pub fn encode_proxies(raw: &RawUserFeatures, schema: &ProxySchema) -> Result<EncodedProxies> {
    let mut schema = schema.clone();
    schema.sort();
    let cols: Vec<usize> = schema
        .features
        .iter()
        .map(|f| {
            raw.names
                .iter()
                .position(|n| *n == f.name)
                .ok_or_else(|| Error::config(format!("feature '{}' missing from user features", f.name)))
        })
        .collect::<Result<_>>()?;
    let width = schema.width();
    let mut unknown = 0;
    let mut missing = 0;
    let mut rows = Vec::with_capacity(raw.rows.len());
    for (user, values) in raw.rows.iter().enumerate() {
        let mut w = vec![0.0; width];
        let mut off = 0;
        for (spec, &col) in schema.features.iter().zip(&cols) {
            match (values.get(col).and_then(|v| v.as_deref()), &spec.kind) {
                (None, _) => missing += 1,
                (Some(v), FeatureKind::Binary) => match v.trim() {
                    "1" | "1.0" | "true" => w[off] = 1.0,
                    "0" | "0.0" | "false" => {}
                    _ => unknown += 1,
                },
                (Some(v), FeatureKind::Categorical { categories }) => {
                    match categories.iter().position(|c| c == v) {
                        Some(k) => w[off + k] = 1.0,
                        None => unknown += 1,
                    }
                }
            }
            off += spec.width();
        }
        rows.push(ProxyRow { user, w });
    }
    if unknown > 0 {
        log::warn!("{unknown} proxy values outside the declared categories were encoded as zero blocks");
    }
    Ok(EncodedProxies {
        rows,
        width,
        unknown_categories: unknown,
        missing_values: missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(names: &[&str], rows: &[&[Option<&str>]]) -> RawUserFeatures {
        RawUserFeatures {
            names: names.iter().map(|s| s.to_string()).collect(),
            rows: rows
                .iter()
                .map(|r| r.iter().map(|v| v.map(str::to_string)).collect())
                .collect(),
        }
    }

    fn cat(name: &str, cats: &[&str]) -> FeatureSpec {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Categorical { categories: cats.iter().map(|s| s.to_string()).collect() },
        }
    }

    #[test]
    fn one_hot_in_declared_order() {
        let r = raw(&["gender"], &[&[Some("m")], &[Some("f")]]);
        let s = ProxySchema { features: vec![cat("gender", &["m", "f"])] };
        let e = encode_proxies(&r, &s).unwrap();
        assert_eq!(e.rows[0].w, vec![1.0, 0.0]);
        assert_eq!(e.rows[1].w, vec![0.0, 1.0]);
    }

    #[test]
    fn width_and_column_order_follow_feature_names() {
        let r = raw(&["zeta", "age", "flag"], &[&[Some("b"), Some("30s"), Some("1")]]);
        let s = ProxySchema {
            features: vec![
                cat("zeta", &["a", "b"]),
                cat("age", &["20s", "30s", "40s"]),
                FeatureSpec { name: "flag".into(), kind: FeatureKind::Binary },
            ],
        };
        let e = encode_proxies(&r, &s).unwrap();
        assert_eq!(e.width, 6);
        // age(3) | flag(1) | zeta(2)
        assert_eq!(e.rows[0].w, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn missing_and_unknown_become_zero_blocks() {
        let r = raw(&["g"], &[&[None], &[Some("x")]]);
        let s = ProxySchema { features: vec![cat("g", &["m", "f"])] };
        let e = encode_proxies(&r, &s).unwrap();
        assert_eq!(e.rows[0].w, vec![0.0, 0.0]);
        assert_eq!(e.rows[1].w, vec![0.0, 0.0]);
        assert_eq!(e.missing_values, 1);
        assert_eq!(e.unknown_categories, 1);
    }

    #[test]
    fn inferred_schema_sorts_categories() {
        let r = raw(&["c"], &[&[Some("z")], &[Some("a")], &[None]]);
        let s = ProxySchema::infer(&r, &["c".to_string()]).unwrap();
        assert_eq!(s.features[0], cat("c", &["a", "z"]));
    }
}
