//! Training configuration files.
//!
//! A config file is a list of `key = value` lines. Keys are dotted paths into
//! the pipeline config (`transe.k = 64`, `actor.lr = 0.0005`); `[section]`
//! headers work too since the format is parsed as TOML. A top-level `seed`
//! reseeds every stage before the other keys are applied.

use std::path::Path;

use anyhow::{bail, Context, Result};
use kgconsult_core::pipeline::PipelineConfig;
use serde_json::Value;

/// Defaults, then `seed`, then the file's keys. `cli_seed` wins over a seed
/// given in the file; keys that set a stage seed explicitly win over both.
pub fn resolve(path: Option<&Path>, cli_seed: Option<u64>) -> Result<PipelineConfig> {
    let overlay = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            parse(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => serde_json::Map::new(),
    };
    apply(overlay, cli_seed)
}

fn parse(text: &str) -> Result<serde_json::Map<String, Value>> {
    let table: toml::Table = text.parse()?;
    match serde_json::to_value(table)? {
        Value::Object(m) => Ok(m),
        _ => unreachable!("a TOML table serializes to an object"),
    }
}

fn apply(
    mut overlay: serde_json::Map<String, Value>,
    cli_seed: Option<u64>,
) -> Result<PipelineConfig> {
    let file_seed = match overlay.remove("seed") {
        Some(v) => Some(v.as_u64().context("seed must be a non-negative integer")?),
        None => None,
    };
    let mut base =
        serde_json::to_value(PipelineConfig::seeded(cli_seed.or(file_seed).unwrap_or(0)))?;
    for (key, value) in overlay {
        let Some(slot) = base.get_mut(&key) else {
            bail!("unknown config section `{key}`");
        };
        merge(slot, value, &key)?;
    }
    Ok(serde_json::from_value(base)?)
}

fn merge(slot: &mut Value, value: Value, path: &str) -> Result<()> {
    match (slot, value) {
        (Value::Object(dst), Value::Object(src)) => {
            for (k, v) in src {
                let child = format!("{path}.{k}");
                match dst.get_mut(&k) {
                    Some(d) => merge(d, v, &child)?,
                    None => bail!("unknown config key `{child}`"),
                }
            }
        }
        (slot, value) => *slot = value,
    }
    Ok(())
}
