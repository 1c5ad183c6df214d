//! TOML config files, deep-merged onto a preset.

use std::fmt;
use std::fs;
use std::path::Path;

use serde_json::{Map, Value};
use stimdiff::pipeline::RunConfig;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn merge_file(base: &RunConfig, path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    merge_str(base, &text).map_err(|ConfigError(msg)| ConfigError(format!("{}: {msg}", path.display())))
}

/// Applies the keys present in `text` over `base`. Unknown keys are errors.
pub fn merge_str(base: &RunConfig, text: &str) -> Result<RunConfig, ConfigError> {
    let overlay: toml::Table = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
    let overlay = serde_json::to_value(overlay).map_err(|e| ConfigError(e.to_string()))?;
    let mut merged = serde_json::to_value(base).map_err(|e| ConfigError(e.to_string()))?;
    merge(&mut merged, overlay, "")?;
    serde_json::from_value(merged).map_err(|e| ConfigError(e.to_string()))
}

fn merge(base: &mut Value, overlay: Value, at: &str) -> Result<(), ConfigError> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => merge_maps(b, o, at),
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

fn merge_maps(base: &mut Map<String, Value>, overlay: Map<String, Value>, at: &str) -> Result<(), ConfigError> {
    for (k, v) in overlay {
        let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
        match base.get_mut(&k) {
            Some(slot) => merge(slot, v, &path)?,
            None => return Err(ConfigError(format!("unknown key `{path}`"))),
        }
    }
    Ok(())
}
