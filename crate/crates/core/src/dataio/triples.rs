//! Whitespace-separated `user item rating` triples with 1-indexed ids.
//!
//! `path` is either one file (treated as biased data) or a directory holding
//! a biased file (name contains `train` or `biased`) and optionally an
//! unbiased file (name contains `test` or `unbiased`).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::{
    assemble_records, empty_proxies, InteractionDataset, Ingested, IngestOptions, IngestReport, Origin,
    RawRecord, ValueKind, DEFAULT_RATING_THRESHOLD,
};
use crate::error::{Error, Result};

fn locate(path: &Path) -> Result<(PathBuf, Option<PathBuf>)> {
    if path.is_file() {
        return Ok((path.to_path_buf(), None));
    }
    let mut biased = None;
    let mut unbiased = None;
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    for p in entries {
        let name = p.file_name().unwrap().to_string_lossy().to_ascii_lowercase();
        if name.contains("unbiased") || name.contains("test") {
            unbiased.get_or_insert(p);
        } else if name.contains("train") || name.contains("biased") {
            biased.get_or_insert(p);
        }
    }
    let biased = biased.ok_or_else(|| Error::config(format!("{}: no biased/train triples file", path.display())))?;
    Ok((biased, unbiased))
}

fn read_triples(path: &Path, origin: Origin, out: &mut Vec<(u64, u64, f64, Origin)>) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in text.lines().enumerate() {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.is_empty() {
            continue;
        }
        if t.len() < 3 {
            return Err(Error::parse(path, i + 1, "expected 'user item rating'"));
        }
        let bad = |what: &str| Error::parse(path, i + 1, format!("invalid {what} '{}'", t[0]));
        let u: u64 = t[0].parse().map_err(|_| bad("user"))?;
        let it: u64 = t[1].parse().map_err(|_| bad("item"))?;
        let v: f64 = t[2].parse().map_err(|_| bad("rating"))?;
        out.push((u, it, v, origin));
    }
    Ok(())
}

fn dense_index(ids: impl Iterator<Item = u64>, declared: Option<usize>, what: &str) -> Result<(Vec<u64>, usize)> {
    let distinct: Vec<u64> = ids.collect::<BTreeSet<_>>().into_iter().collect();
    let n = match declared {
        Some(n) if n < distinct.len() => {
            return Err(Error::config(format!(
                "{} distinct {what}s exceed the declared count {n}",
                distinct.len()
            )))
        }
        Some(n) => n,
        None if distinct.is_empty() => {
            return Err(Error::config(format!("empty input and num_{what}s undeclared")))
        }
        None => distinct.len(),
    };
    Ok((distinct, n))
}

pub(super) fn ingest(path: &Path, opts: IngestOptions) -> Result<Ingested> {
    let (biased, unbiased) = locate(path)?;
    let mut triples = Vec::new();
    read_triples(&biased, Origin::Biased, &mut triples)?;
    if let Some(u) = &unbiased {
        read_triples(u, Origin::Unbiased, &mut triples)?;
    }
    let (users, num_users) = dense_index(triples.iter().map(|t| t.0), opts.num_users, "user")?;
    let (items, num_items) = dense_index(triples.iter().map(|t| t.1), opts.num_items, "item")?;
    let raw = triples
        .into_iter()
        .map(|(u, i, value, origin)| RawRecord {
            user: users.binary_search(&u).unwrap(),
            item: items.binary_search(&i).unwrap(),
            value,
            origin,
        })
        .collect();
    let mut report = IngestReport::default();
    let records = assemble_records(raw, &mut report);
    let dataset = InteractionDataset {
        num_users,
        num_items,
        records,
        proxies: empty_proxies(num_users),
        proxy_width: 0,
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
    fn empty_file_needs_declared_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.txt");
        fs::write(&p, "").unwrap();
        assert!(ingest(&p, IngestOptions::default()).is_err());
        let d = ingest(&p, IngestOptions { num_users: Some(3), num_items: Some(2) }).unwrap().dataset;
        assert_eq!(d.records.len(), 0);
        assert_eq!((d.num_users, d.num_items), (3, 2));
    }

    #[test]
    fn directory_with_train_and_test() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("ratings-train.txt"), "1 1 5\n1 3 2\n2 2 4\n1 1 3\n").unwrap();
        fs::write(dir.path().join("ratings-test.txt"), "2 1 1\n2 3 5\n").unwrap();
        let ing = ingest(dir.path(), IngestOptions::default()).unwrap();
        let d = ing.dataset;
        assert_eq!((d.num_users, d.num_items), (2, 3));
        assert_eq!(d.count(Origin::Biased), 3);
        assert_eq!(d.count(Origin::Unbiased), 2);
        assert_eq!(ing.report.duplicates, 1);
        assert_eq!(d.records[0].value, 3.0);
        assert_eq!(d.records[0].user, 0);
    }

    #[test]
    fn malformed_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.txt");
        fs::write(&p, "1 1 5\n1 2\n").unwrap();
        assert!(matches!(ingest(&p, IngestOptions::default()), Err(Error::Parse { line: 2, .. })));
    }
}
