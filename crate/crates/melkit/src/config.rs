//! Layered configuration: defaults, then a TOML file, then `MELKIT_*`
//! environment variables, then command-line flags.
//!
//! Environment keys map onto the config tree with `__` between levels:
//! `MELKIT_K=10`, `MELKIT_LLM__ENDPOINT_URL=http://...`,
//! `MELKIT_PATHS__ENTITIES=kb.jsonl`.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use melkit_core::pipeline::PipelineConfig;
use serde_json::{Map, Value};

pub const ENV_PREFIX: &str = "MELKIT_";
/// Environment variables with the prefix that are not config keys.
const ENV_RESERVED: &[&str] = &["MELKIT_CONFIG", "MELKIT_LOG"];

/// Marks configuration problems, reported as usage errors.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(ConfigError(msg.into()))
}

/// Merges `overlay` into `base`. Keys absent from `base` are rejected so
/// typos do not pass silently.
fn merge(base: &mut Value, overlay: &Value, path: &str, origin: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &sub, origin)?,
                    None => return Err(config_err(format!("{origin}: unknown config key {sub:?}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Reads an environment value using the default's type as a guide: string
/// settings take the raw text, everything else is parsed as JSON.
fn env_value(default: Option<&Value>, raw: &str) -> Value {
    match default {
        Some(Value::String(_)) => Value::String(raw.to_string()),
        _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
    }
}

fn lookup<'a>(v: &'a Value, path: &[String]) -> Option<&'a Value> {
    path.iter().try_fold(v, |cur, k| cur.get(k))
}

pub fn env_overlay(defaults: &Value, vars: impl IntoIterator<Item = (String, String)>) -> Result<Value> {
    let mut overlay = Value::Object(Map::new());
    let mut vars: Vec<_> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && !ENV_RESERVED.contains(&k.as_str()))
        .collect();
    vars.sort();
    for (k, raw) in vars {
        let path: Vec<String> = k[ENV_PREFIX.len()..].to_lowercase().split("__").map(str::to_string).collect();
        if lookup(defaults, &path).is_none() {
            return Err(config_err(format!("environment variable {k} does not name a config key")));
        }
        deep_insert(&mut overlay, &path, env_value(lookup(defaults, &path), &raw));
    }
    Ok(overlay)
}

fn deep_insert(target: &mut Value, path: &[String], leaf: Value) {
    let mut cur = target;
    for (i, k) in path.iter().enumerate() {
        let obj = cur.as_object_mut().expect("overlay levels are objects");
        if i + 1 == path.len() {
            obj.insert(k.clone(), leaf);
            return;
        }
        cur = obj.entry(k.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
}

pub fn file_overlay(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    Ok(serde_json::to_value(table)?)
}

/// Resolves the final configuration. `flags` holds only the options given
/// on the command line, shaped like the config tree.
pub fn resolve(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    flags: &Value,
) -> Result<PipelineConfig> {
    let defaults = serde_json::to_value(PipelineConfig::default())?;
    let mut v = defaults.clone();
    if let Some(f) = file {
        let overlay = file_overlay(f)?;
        merge(&mut v, &overlay, "", &f.display().to_string())?;
    }
    merge(&mut v, &env_overlay(&defaults, env)?, "", "environment")?;
    merge(&mut v, flags, "", "command line")?;
    let config: PipelineConfig =
        serde_json::from_value(v).map_err(|e| config_err(format!("invalid configuration: {e}")))?;
    config.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(config)
}
