//! Per-subcommand JSON config sections merged under command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub const SECTIONS: [&str; 12] = [
    "validate",
    "count",
    "plan",
    "skeleton",
    "place-search",
    "place-grid",
    "discretize",
    "simulate",
    "latency-fit",
    "latency-predict",
    "pareto",
    "dot",
];

#[derive(Debug, Default)]
pub struct ConfigFile {
    sections: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::usage(format!("cannot read config: {e}")).with("path", path.display().to_string())
        })?;
        let value: Value = serde_json::from_str(&text).map_err(|e| {
            CliError::usage(format!("config is not valid JSON: {e}")).with("path", path.display().to_string())
        })?;
        let Value::Object(sections) = value else {
            return Err(CliError::usage("config must be a JSON object keyed by subcommand"));
        };
        for (key, v) in &sections {
            if !SECTIONS.contains(&key.as_str()) {
                return Err(CliError::usage(format!("unknown config section '{key}'")).with("section", key.as_str()));
            }
            if !v.is_object() {
                return Err(
                    CliError::usage(format!("config section '{key}' must be an object")).with("section", key.as_str())
                );
            }
        }
        Ok(Self { sections })
    }

    /// Flags win over the file. Unset flags (`None`, `false`) fall through to
    /// the section; keys the subcommand does not know are rejected.
    pub fn resolve<T: Serialize + DeserializeOwned>(&self, section: &str, flags: &T) -> CliResult<T> {
        let mut merged = match self.sections.get(section) {
            Some(Value::Object(m)) => m.clone(),
            _ => Map::new(),
        };
        let Value::Object(given) = serde_json::to_value(flags).expect("flags serialize") else {
            unreachable!("argument structs serialize to objects");
        };
        // every field serializes (unset ones as null), so the flag object lists the known keys
        if let Some(k) = merged.keys().find(|k| !given.contains_key(*k)) {
            return Err(CliError::usage(format!("unknown key '{k}' in config section '{section}'"))
                .with("section", section)
                .with("key", k.as_str()));
        }
        for (k, v) in given {
            if !(v.is_null() || v == Value::Bool(false)) {
                merged.insert(k, v);
            }
        }
        serde_json::from_value(Value::Object(merged))
            .map_err(|e| CliError::usage(format!("config section '{section}': {e}")).with("section", section))
    }
}
