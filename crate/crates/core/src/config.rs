//! Flat JSON configuration documents.
//!
//! A document is a single JSON object whose keys are the field names of
//! [`RunConfig`], `ServerConfig` and `LearnerConfig`. An optional `sweep`
//! key holds exactly one axis: `{"sweep": {"detector": ["bayes", "chisq"]}}`.
//! `KEY=VALUE` overrides are applied after the file, last one wins; values
//! are parsed as JSON and fall back to plain strings.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::harness::RunConfig;

pub const SWEEP_KEY: &str = "sweep";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub run: RunConfig,
    pub sweep: Option<SweepAxis>,
}

pub fn known_keys() -> BTreeSet<String> {
    to_flat_map(&RunConfig::default()).keys().cloned().collect()
}

pub fn to_flat_map(config: &RunConfig) -> Map<String, Value> {
    match serde_json::to_value(config) {
        Ok(Value::Object(map)) => map,
        _ => unreachable!("RunConfig serializes to an object"),
    }
}

pub fn from_flat_map(map: &Map<String, Value>) -> Result<RunConfig> {
    let known = known_keys();
    if let Some(unknown) = map.keys().find(|k| !known.contains(*k)) {
        return Err(Error::Config(format!("unknown key `{unknown}`")));
    }
    serde_json::from_value(Value::Object(map.clone())).map_err(|e| Error::Config(e.to_string()))
}

pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{text}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn parse_sweep(value: &Value) -> Result<SweepAxis> {
    let Value::Object(axes) = value else {
        return Err(Error::Config(
            "`sweep` must be an object of KEY: [values]".into(),
        ));
    };
    if axes.len() != 1 {
        return Err(Error::Config(format!(
            "exactly one sweep axis is allowed, found {}",
            axes.len()
        )));
    }
    let (key, values) = axes.iter().next().expect("one entry");
    if !known_keys().contains(key) {
        return Err(Error::Config(format!("unknown sweep key `{key}`")));
    }
    let Value::Array(values) = values else {
        return Err(Error::Config(format!(
            "sweep values for `{key}` must be a list"
        )));
    };
    if values.is_empty() {
        return Err(Error::Config(format!("sweep list for `{key}` is empty")));
    }
    Ok(SweepAxis {
        key: key.clone(),
        values: values.clone(),
    })
}

/// Merges an optional config file with overrides and validates the result.
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<ResolvedConfig> {
    let mut map = to_flat_map(&RunConfig::default());
    if let Some(path) = path {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(doc) = doc else {
            return Err(Error::Config(format!(
                "{} is not a JSON object",
                path.display()
            )));
        };
        map.extend(doc);
    }
    for text in overrides {
        let (key, value) = parse_override(text)?;
        map.insert(key, value);
    }
    let sweep = map.remove(SWEEP_KEY).map(|v| parse_sweep(&v)).transpose()?;
    let run = from_flat_map(&map)?;
    run.validate().map_err(|e| match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(other.to_string()),
    })?;
    Ok(ResolvedConfig { run, sweep })
}

/// `base` with `key` set to `value`, validated.
pub fn with_value(base: &RunConfig, key: &str, value: &Value) -> Result<RunConfig> {
    let mut map = to_flat_map(base);
    map.insert(key.to_string(), value.clone());
    let run = from_flat_map(&map)?;
    run.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(run)
}
