//! Coat: two whitespace-separated user × item rating matrices (`train.ascii`
//! self-selected, `test.ascii` uniformly assigned; 0 = unobserved) plus an
//! optional binary user-feature matrix.

use std::fs;
use std::path::{Path, PathBuf};

use super::proxies::{encode_proxies, FeatureKind, FeatureSpec, ProxySchema, RawUserFeatures};
use super::{
    assemble_records, empty_proxies, InteractionDataset, Ingested, IngestReport, Origin, RawRecord,
    ValueKind, DEFAULT_RATING_THRESHOLD,
};
use crate::error::{Error, Result};

fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::parse(path, i + 1, format!("not a number: '{t}'"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            let first: &Vec<f64> = first;
            if first.len() != row.len() {
                return Err(Error::parse(path, i + 1, "row width differs from the first row"));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn find(dir: &Path, candidates: &[&str]) -> Option<PathBuf> {
    candidates.iter().map(|c| dir.join(c)).find(|p| p.is_file())
}

pub(super) fn ingest(dir: &Path) -> Result<Ingested> {
    let train_path = find(dir, &["train.ascii"]).ok_or_else(|| {
        Error::io(dir.join("train.ascii"), std::io::Error::new(std::io::ErrorKind::NotFound, "missing"))
    })?;
    let test_path = find(dir, &["test.ascii"]).ok_or_else(|| {
        Error::io(dir.join("test.ascii"), std::io::Error::new(std::io::ErrorKind::NotFound, "missing"))
    })?;
    let train = read_matrix(&train_path)?;
    let test = read_matrix(&test_path)?;
    let num_users = train.len();
    let num_items = train.first().map_or(0, Vec::len);
    if test.len() != num_users || test.first().map_or(0, Vec::len) != num_items {
        return Err(Error::parse(&test_path, 1, "test matrix shape differs from train matrix"));
    }

    let mut raw = Vec::new();
    for (matrix, origin) in [(&train, Origin::Biased), (&test, Origin::Unbiased)] {
        for (user, row) in matrix.iter().enumerate() {
            for (item, &value) in row.iter().enumerate() {
                if value != 0.0 {
                    raw.push(RawRecord { user, item, value, origin });
                }
            }
        }
    }
    let mut report = IngestReport::default();
    let records = assemble_records(raw, &mut report);

    let feature_path = find(
        dir,
        &["user_item_features/user_features.ascii", "user_features.ascii"],
    );
    let (proxies, proxy_width) = match feature_path {
        Some(p) => {
            let m = read_matrix(&p)?;
            if m.len() != num_users {
                return Err(Error::parse(&p, 1, "user feature matrix must have one row per user"));
            }
            let width = m.first().map_or(0, Vec::len);
            let names: Vec<String> = (0..width).map(|j| format!("f{j:03}")).collect();
            let rows = m
                .iter()
                .map(|r| r.iter().map(|v| Some(if *v != 0.0 { "1" } else { "0" }.to_string())).collect())
                .collect();
            let raw_features = RawUserFeatures { names: names.clone(), rows };
            let schema = ProxySchema {
                features: names
                    .into_iter()
                    .map(|name| FeatureSpec { name, kind: FeatureKind::Binary })
                    .collect(),
            };
            let enc = encode_proxies(&raw_features, &schema)?;
            report.unknown_categories += enc.unknown_categories;
            (enc.rows, enc.width)
        }
        None => {
            report.warnings.push("no user feature file found; proxies are empty".into());
            (empty_proxies(num_users), 0)
        }
    };

    let dataset = InteractionDataset {
        num_users,
        num_items,
        records,
        proxies,
        proxy_width,
        value_kind: ValueKind::Rating {
            threshold: DEFAULT_RATING_THRESHOLD,
        },
    };
    dataset.validate()?;
    Ok(Ingested { dataset, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_small_matrices() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.ascii"), "0 4 0\n5 0 1\n").unwrap();
        fs::write(dir.path().join("test.ascii"), "3 0 2\n0 0 4\n").unwrap();
        fs::create_dir(dir.path().join("user_item_features")).unwrap();
        fs::write(dir.path().join("user_item_features/user_features.ascii"), "1 0\n0 1\n").unwrap();
        let ing = ingest(dir.path()).unwrap();
        let d = ing.dataset;
        assert_eq!((d.num_users, d.num_items), (2, 3));
        assert_eq!(d.count(Origin::Biased), 3);
        assert_eq!(d.count(Origin::Unbiased), 3);
        assert_eq!(d.proxies[1].w, vec![0.0, 1.0]);
    }

    #[test]
    fn bad_token_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.ascii"), "0 4\n5 x\n").unwrap();
        fs::write(dir.path().join("test.ascii"), "0 0\n0 0\n").unwrap();
        match ingest(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
