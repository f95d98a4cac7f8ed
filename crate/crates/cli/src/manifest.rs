use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliResult;

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after merging `--config` with the flags.
    pub config: Value,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub wall_clock_secs: f64,
    pub tool_version: String,
    /// Command-specific details (e.g. the loss terms of a distillation).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Value>,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>, deterministic: bool) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                config: serde_json::to_value(config).expect("arguments serialize"),
                seed,
                deterministic,
                artifacts: BTreeMap::new(),
                wall_clock_secs: 0.0,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                extra: BTreeMap::new(),
            },
            started: Instant::now(),
        }
    }

    pub fn artifact(&mut self, name: &str, path: &Path) {
        self.manifest.artifacts.insert(name.to_string(), path.to_path_buf());
    }

    pub fn extra(&mut self, key: &str, value: impl Serialize) {
        self.manifest.extra.insert(key.to_string(), serde_json::to_value(value).expect("value serializes"));
    }

    pub fn write(mut self, path: &Path) -> CliResult<RunManifest> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        cona::io::write_atomic(path, text.as_bytes()).map_err(|e| crate::error::CliError::from(e).context(path.display()))?;
        Ok(self.manifest)
    }
}

/// `<output>.manifest.json` unless a path was given.
pub fn path_for(explicit: Option<&Path>, output: &Path) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| sibling(output, "manifest.json"))
}

/// `<output>.<suffix>`.
pub fn sibling(output: &Path, suffix: &str) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
