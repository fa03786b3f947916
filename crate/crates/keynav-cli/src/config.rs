//! Run configuration: a TOML file plus CLI overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use keynav::backend::BackendConfig;
use keynav::probing::{CorrectnessMode, Strategy};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PathsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clustering: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_n_query")]
    pub n_query: usize,
    #[serde(default = "default_n_key")]
    pub n_key: usize,
    #[serde(default = "default_correctness")]
    pub correctness: CorrectnessMode,
}

fn default_strategy() -> Strategy {
    Strategy::Icn
}
fn default_n_query() -> usize {
    10
}
fn default_n_key() -> usize {
    5
}
fn default_correctness() -> CorrectnessMode {
    CorrectnessMode::Greedy
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            strategy: default_strategy(),
            n_query: default_n_query(),
            n_key: default_n_key(),
            correctness: default_correctness(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<BackendConfig>,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Record all backend traffic to `<output_dir>/trace.ndjson`.
    #[serde(default)]
    pub trace: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {path:?}: {e}")))?;
        toml::from_str(&raw).map_err(|e| CliError::Config(format!("config {path:?}: {e}")))
    }

    /// Every referenced path must exist at launch.
    pub fn validate(&self) -> Result<(), CliError> {
        let check = |name: &str, p: &Option<PathBuf>| -> Result<(), CliError> {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::Config(format!("{name} {p:?} does not exist")));
                }
            }
            Ok(())
        };
        check("tensor_file", &self.paths.tensor_file)?;
        check("vocab_file", &self.paths.vocab_file)?;
        check("clustering", &self.paths.clustering)?;
        check("tasks", &self.paths.tasks)?;
        for (label, backend) in [("backend", &self.backend), ("judge", &self.judge)] {
            if let Some(cfg) = backend {
                cfg.validate()
                    .map_err(|e| CliError::Config(format!("{label}: {e}")))?;
                check(&format!("{label} path"), &cfg.path)?;
            }
        }
        Ok(())
    }

    /// Hash of the canonical serialized config; embedded in every emitted
    /// file so runs are comparable.
    pub fn config_hash(&self) -> String {
        let canonical = toml::to_string(self).unwrap_or_default();
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest: String = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        digest[..16].to_string()
    }

    pub fn backend_required(&self) -> Result<&BackendConfig, CliError> {
        self.backend
            .as_ref()
            .ok_or_else(|| CliError::Config("no [backend] section configured".into()))
    }
}
