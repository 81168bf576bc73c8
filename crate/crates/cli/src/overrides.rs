//! Config loading with `section.key=value` overrides applied before parsing.

use std::path::Path;

use lcdr_core::RunConfig;
use toml::{Table, Value};

use crate::CliError;

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table: Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", p.display())))?;
            text.parse()
                .map_err(|e| CliError::Input(format!("config {}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply(&mut table, o)?;
    }
    let text = toml::to_string(&table).map_err(|e| CliError::Input(e.to_string()))?;
    Ok(RunConfig::from_toml(&text)?)
}

pub fn apply(table: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Input(format!("override '{assignment}' is not KEY=VALUE")))?;
    let (section, field) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| CliError::Input(format!("override key '{key}' needs a section, e.g. train.lambda")))?;
    let value = parse_value(raw.trim());
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    match entry {
        Value::Table(t) => {
            t.insert(field.to_string(), value);
            Ok(())
        }
        _ => Err(CliError::Input(format!("'{section}' is not a section"))),
    }
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

pub fn set<T: Into<Value>>(table_cfg: &mut RunConfig, section: &str, field: &str, v: T) -> Result<(), CliError> {
    let mut table: Table = toml::from_str(&table_cfg.to_toml()).map_err(|e| CliError::Input(e.to_string()))?;
    if let Some(Value::Table(t)) = table.get_mut(section) {
        t.insert(field.into(), v.into());
    }
    *table_cfg = RunConfig::from_toml(&toml::to_string(&table).map_err(|e| CliError::Input(e.to_string()))?)?;
    Ok(())
}

/// `3`, `0,1,2` or `0..10`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Input(format!("cannot parse seeds '{spec}'"));
    if let Some((a, b)) = spec.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b <= a {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_before_parsing() {
        let c = load(None, &["train.lambda=0.25".into(), "run.method=mf".into(), "data.name=coat".into()]).unwrap();
        assert_eq!(c.train.lambda, 0.25);
        assert_eq!(c.run.method, lcdr_core::Method::Mf);
        assert_eq!(c.data.name, "coat");
        assert!(load(None, &["lambda=1".into()]).is_err());
        assert!(load(None, &["train.nope=1".into()]).is_err());
    }

    #[test]
    fn seed_specs() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("4, 7").unwrap(), vec![4, 7]);
        assert_eq!(parse_seeds("5").unwrap(), vec![5]);
        assert!(parse_seeds("3..1").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn typed_set() {
        let mut c = RunConfig::default();
        set(&mut c, "train", "lambda", 0.4).unwrap();
        assert_eq!(c.train.lambda, 0.4);
    }
}
