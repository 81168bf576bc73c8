//! Run-directory layout and the conflict rule for output paths.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

pub const SNAPSHOT: &str = "config.snapshot.toml";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const DIAGNOSTICS: &str = "diagnostics.txt";

/// Fails with a conflict unless `dir` is absent, empty, or `force` is set.
pub fn prepare(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(CliError::Conflict(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    for sub in ["checkpoints", "logs", "metrics"] {
        mkdir(&dir.join(sub))?;
    }
    Ok(())
}

pub fn prepare_flat(dir: &Path, force: bool) -> Result<(), CliError> {
    prepare(dir, force)?;
    for sub in ["checkpoints", "logs", "metrics"] {
        let _ = fs::remove_dir(dir.join(sub));
    }
    mkdir(dir)
}

pub fn mkdir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
    write(path, text + "\n")
}

pub fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

pub fn checkpoint(dir: &Path, seed: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("seed_{seed}.json"))
}

pub fn stage_log(dir: &Path, seed: u64, stage: u8) -> PathBuf {
    dir.join("logs").join(format!("seed_{seed}.stage{stage}.jsonl"))
}

pub fn seed_metrics(dir: &Path, seed: u64) -> PathBuf {
    dir.join("metrics").join(format!("seed_{seed}.json"))
}

pub fn jsonl<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).map_err(|e| CliError::Input(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conflict_only_for_non_empty_dirs() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("run");
        prepare(&d, false).unwrap();
        assert!(d.join("checkpoints").is_dir());
        assert!(matches!(prepare(&d, false), Err(CliError::Conflict(_))));
        prepare(&d, true).unwrap();
    }
}
