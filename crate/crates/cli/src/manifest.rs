//! Run manifests: the resolved flags of a command plus its inputs and
//! outputs, enough to re-run it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    /// Every flag of the command after defaults and config-file merging.
    pub config: BTreeMap<String, Value>,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    /// Output paths keyed by the flag that names them.
    pub outputs: BTreeMap<String, PathBuf>,
    pub duration_secs: f64,
}

/// Manifest path written next to a primary output.
pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        mmssl::params::write_atomic(path, text.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(mmssl::Error::Format(format!(
                "manifest version {}, expected {MANIFEST_VERSION}",
                m.format_version
            ))
            .into());
        }
        Ok(m)
    }

    /// Command line equivalent to the recorded run, optionally moving every
    /// output into `output_dir`.
    pub fn to_argv(&self, output_dir: Option<&Path>) -> Result<Vec<String>, CliError> {
        let mut config = self.config.clone();
        if let Some(dir) = output_dir {
            for (key, path) in &self.outputs {
                let name = path
                    .file_name()
                    .ok_or_else(|| CliError::Usage(format!("output {key} has no file name")))?;
                config.insert(key.clone(), Value::String(dir.join(name).to_string_lossy().into_owned()));
            }
        }
        let mut argv = vec!["mmssl".to_string(), self.command.clone()];
        for (key, value) in &config {
            let flag = format!("--{}", key.replace('_', "-"));
            match value {
                Value::Null | Value::Bool(false) => {}
                Value::Bool(true) => argv.push(flag),
                Value::Array(items) => {
                    let joined: Vec<String> = items.iter().map(scalar).collect::<Result<_, _>>()?;
                    argv.push(flag);
                    argv.push(joined.join(","));
                }
                other => {
                    argv.push(flag);
                    argv.push(scalar(other)?);
                }
            }
        }
        Ok(argv)
    }
}

fn scalar(v: &Value) -> Result<String, CliError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        other => Err(CliError::Usage(format!("unsupported manifest value {other}"))),
    }
}
