//! `--config <json>` handling: a JSON object whose keys are a command's
//! long flag names (snake_case). Flags given on the command line win.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// Settings shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Globals {
    pub deterministic: bool,
    pub json: bool,
}

/// Overlays the flags onto the config file and returns the merged arguments.
///
/// Unset flags (`None`) and `false` switches never override the file. Keys
/// are checked against the serialized argument struct, which also covers
/// flattened groups.
pub fn merge<A: Serialize + DeserializeOwned>(flags: A, config: Option<&Path>, globals: &mut Globals) -> CliResult<A> {
    let Some(path) = config else {
        return Ok(flags);
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::flag(e.to_string()).context(path.display()))?;
    let mut merged = match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(CliError::flag("config must be a JSON object").context(path.display())),
        Err(e) => return Err(CliError::flag(e.to_string()).context(path.display())),
    };
    for key in ["deterministic", "json"] {
        match merged.remove(key) {
            None => {}
            Some(Value::Bool(b)) => {
                let slot = if key == "json" { &mut globals.json } else { &mut globals.deterministic };
                *slot |= b;
            }
            Some(_) => return Err(CliError::flag(format!("`{key}` must be a boolean")).context(path.display())),
        }
    }
    let Value::Object(given) = serde_json::to_value(&flags).expect("flags serialize") else {
        unreachable!("argument structs serialize to objects");
    };
    let known: Vec<String> = given.keys().cloned().collect();
    if let Some(unknown) = merged.keys().find(|k| !known.contains(k)) {
        return Err(CliError::flag(format!("unknown key `{unknown}`")).context(path.display()));
    }
    overlay(&mut merged, given);
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::flag(e.to_string()).context(path.display()))
}

fn overlay(base: &mut Map<String, Value>, flags: Map<String, Value>) {
    for (k, v) in flags {
        if !matches!(v, Value::Null | Value::Bool(false)) {
            base.insert(k, v);
        }
    }
}

/// The run seed: required in deterministic mode, otherwise drawn from the
/// clock and recorded in the manifest.
pub fn resolve_seed(seed: Option<u64>, globals: &Globals) -> CliResult<u64> {
    match seed {
        Some(s) => Ok(s),
        None if globals.deterministic => Err(CliError::flag("--seed is required with --deterministic")),
        None => Ok(SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0)),
    }
}
