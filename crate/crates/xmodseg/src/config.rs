//! Training configuration files: TOML with every field addressable by a
//! dotted key. Unknown keys are rejected by name.

use std::path::Path;

use sha2::{Digest, Sha256};
use toml::{Table, Value};
use xmodseg_core::train::TrainConfig;

use crate::error::{Error, IoContext, Result};

/// Parses a config document; missing fields take their defaults.
pub fn parse(text: &str) -> Result<TrainConfig> {
    let table: Table = text.parse().map_err(|e| Error::Invalid(format!("config: {e}")))?;
    from_table(table)
}

pub fn load(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).at(path)?;
    parse(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

/// Loads `path` (or the defaults) and applies `key=value` overrides, where
/// the value is a TOML literal (bare words are read as strings).
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).at(p)?;
            text.parse::<Table>()
                .map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("override `{o}` is not of the form key=value")))?;
        set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
    }
    from_table(table)
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Invalid(format!("malformed config key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let next = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Invalid(format!("config key `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn from_table(table: Table) -> Result<TrainConfig> {
    let reference = Value::try_from(TrainConfig::default()).expect("defaults serialize");
    check_keys(&table, reference.as_table().expect("table"), "")?;
    let config: TrainConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Invalid(format!("config: {}", e.message())))?;
    config.validate()?;
    Ok(config)
}

fn check_keys(user: &Table, reference: &Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match reference.get(k) {
            None => return Err(Error::Invalid(format!("unknown config key `{path}`"))),
            Some(Value::Table(r)) => match v {
                Value::Table(u) => check_keys(u, r, &path)?,
                _ => return Err(Error::Invalid(format!("config key `{path}` must be a table"))),
            },
            Some(_) => {}
        }
    }
    Ok(())
}

/// The config with every default materialized.
pub fn to_toml(config: &TrainConfig) -> String {
    toml::to_string_pretty(config).expect("config serializes")
}

/// Hex SHA-256 of the canonical JSON form.
pub fn config_hash(config: &TrainConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}
