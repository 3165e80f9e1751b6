//! Run configuration, read from TOML.
//!
//! Relative paths are resolved against the directory of the config file.
//! `CAP_CACHE_DIR` overrides `cache_dir`; `CAP_CONFIG` names the default
//! config file for the CLI.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agreement::AgreementConfig;
use crate::cite::CiteConfig;
use crate::creativity::CreativityConfig;
use crate::gateway::http::HttpTransport;
use crate::gateway::mock::MockTransport;
use crate::gateway::{Gateway, ResponseCache, RetryPolicy, RoutingTransport};
use crate::models::{Backends, Models};

pub const ENV_CONFIG: &str = "CAP_CONFIG";
pub const ENV_CACHE_DIR: &str = "CAP_CACHE_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("mock script {path}: {message}")]
    Mock { path: String, message: String },
}

fn d_seed() -> u64 {
    0
}
fn d_inflight() -> usize {
    8
}
fn d_n_psa() -> usize {
    250
}
fn d_n_com() -> usize {
    300
}
fn d_reprompts() -> u32 {
    1
}
fn d_failure() -> f64 {
    0.1
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_map: Option<PathBuf>,
    /// Whether the split is sampled; when false every classified record is
    /// scored.
    #[serde(default = "d_true")]
    pub sample: bool,
    #[serde(default = "d_n_psa")]
    pub n_psa: usize,
    #[serde(default = "d_n_com")]
    pub n_commercial: usize,
    pub backends: Backends,
    #[serde(default)]
    pub cite: CiteConfig,
    #[serde(default)]
    pub creativity: CreativityConfig,
    #[serde(default)]
    pub agreement: AgreementConfig,
    #[serde(default = "d_inflight")]
    pub max_inflight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "d_reprompts")]
    pub reprompts: u32,
    #[serde(default)]
    pub freeze: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "d_seed")]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Fraction of failed pairs above which a scoring run fails.
    #[serde(default = "d_failure")]
    pub max_failure_rate: f64,
    /// Base directory for relative paths; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml_str(s: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.backends.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.cite.validate().map_err(ConfigError::Invalid)?;
        self.creativity.validate().map_err(ConfigError::Invalid)?;
        if self.max_inflight == 0 {
            return inv("max_inflight must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return inv(format!("max_failure_rate {} must be in [0, 1]", self.max_failure_rate));
        }
        if !(self.agreement.tie_eps >= 0.0) {
            return inv("agreement.tie_eps must be >= 0".into());
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.resolve(&self.dataset)
    }

    pub fn topic_map_path(&self) -> Option<PathBuf> {
        self.topic_map.as_deref().map(|p| self.resolve(p))
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    /// Cache directory from `CAP_CACHE_DIR`, else the config value.
    pub fn cache_path(&self) -> Option<PathBuf> {
        match std::env::var_os(ENV_CACHE_DIR) {
            Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
            _ => self.cache_dir.as_deref().map(|p| self.resolve(p)),
        }
    }

    /// SHA-256 over the canonical JSON form of every field that influences
    /// scores. Paths enter as written, so moving a checkout keeps the digest.
    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut material = v.as_object().cloned().unwrap_or_default();
        for k in ["output_dir", "cache_dir", "max_inflight", "max_failure_rate"] {
            material.remove(k);
        }
        let canonical: BTreeMap<_, _> = material.into_iter().collect();
        hex::encode(Sha256::digest(serde_json::to_vec(&canonical).expect("json")))
    }

    /// Gateway and model roles as configured. `mock:<path>` endpoints are
    /// loaded from script files resolved against the config directory.
    pub fn build_models(&self) -> Result<(Models, BTreeMap<String, Arc<MockTransport>>), ConfigError> {
        let mut routing = RoutingTransport::new(HttpTransport::new());
        let mut mocks = BTreeMap::new();
        for p in self.backends.all() {
            if let Some(rest) = p.endpoint.strip_prefix("mock:") {
                if mocks.contains_key(&p.endpoint) {
                    continue;
                }
                let path = self.resolve(Path::new(rest));
                let m = Arc::new(MockTransport::from_file(&path).map_err(|message| ConfigError::Mock {
                    path: path.display().to_string(),
                    message,
                })?);
                routing = routing.with_mock(p.endpoint.clone(), m.clone());
                mocks.insert(p.endpoint.clone(), m);
            }
        }
        let cache = match self.cache_path() {
            Some(dir) => ResponseCache::on_disk(&dir).map_err(|source| ConfigError::Io {
                path: dir.display().to_string(),
                source,
            })?,
            None => ResponseCache::in_memory(),
        };
        let gateway = Gateway::builder(Arc::new(routing))
            .cache(cache)
            .max_inflight(self.max_inflight)
            .retry(self.retry)
            .freeze(self.freeze)
            .build();
        let mut models = Models::new(Arc::new(gateway), self.backends.clone());
        models.reprompts = self.reprompts;
        Ok((models, mocks))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
dataset = "data/records.jsonl"
output_dir = "out"

[backends.chat]
role = "chat"
endpoint = "mock:script.json"
model_id = "llama"

[backends.vision]
role = "vision"
endpoint = "mock:script.json"
model_id = "internvl"

[backends.text_embed]
role = "text-embed"
endpoint = "mock:script.json"
model_id = "st"

[backends.image_embed]
role = "image-embed"
endpoint = "mock:script.json"
model_id = "clip"
"#;

    #[test]
    fn defaults_and_paths() {
        let cfg = RunConfig::from_toml_str(MIN, "/base").unwrap();
        assert_eq!(cfg.cite.alpha, 4.0);
        assert_eq!(cfg.creativity.denom_floor, 0.05);
        assert_eq!((cfg.n_psa, cfg.n_commercial, cfg.max_inflight), (250, 300, 8));
        assert_eq!(cfg.max_failure_rate, 0.1);
        assert_eq!(cfg.dataset_path(), PathBuf::from("/base/data/records.jsonl"));
    }

    #[test]
    fn digest_ignores_output_and_concurrency() {
        let a = RunConfig::from_toml_str(MIN, "/a").unwrap();
        let mut b = a.clone();
        b.max_inflight = 1;
        b.output_dir = "elsewhere".into();
        b.base_dir = "/b".into();
        assert_eq!(a.digest(), b.digest());
        b.cite.alpha = 2.0;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn rejects_bad_values() {
        let bad = MIN.replace("role = \"vision\"", "role = \"chat\"");
        assert!(matches!(RunConfig::from_toml_str(&bad, "."), Err(ConfigError::Invalid(_))));
        let bad = format!("max_inflight = 0\n{MIN}");
        assert!(matches!(RunConfig::from_toml_str(&bad, "."), Err(ConfigError::Invalid(_))));
        let bad = format!("bogus = 1\n{MIN}");
        assert!(matches!(RunConfig::from_toml_str(&bad, "."), Err(ConfigError::Parse(_))));
        let bad = format!("{MIN}\n[cite]\nalpha = -1.0\n");
        assert!(matches!(RunConfig::from_toml_str(&bad, "."), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn mock_endpoints_load_scripts() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("script.json"), r#"{"rules":[]}"#).unwrap();
        let cfg = RunConfig::from_toml_str(MIN, dir.path()).unwrap();
        let (_, mocks) = cfg.build_models().unwrap();
        assert_eq!(mocks.len(), 1);
        let cfg = RunConfig::from_toml_str(&MIN.replace("script.json", "missing.json"), dir.path()).unwrap();
        assert!(matches!(cfg.build_models(), Err(ConfigError::Mock { .. })));
    }
}
