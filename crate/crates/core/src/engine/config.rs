use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::distribution::StrategySpec;

/// Environment variable naming a default engine config document.
pub const CONFIG_ENV: &str = "CHUNKSTREAM_CONFIG";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Stream,
    File,
}

/// What a stream writer does when its step queue is full.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueuePolicy {
    /// Drop the step being ended.
    Discard,
    /// Wait until a reader frees a slot.
    #[default]
    Block,
}

/// Runtime engine selection and tuning, loadable from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub engine: EngineKind,
    #[serde(default)]
    pub queue_policy: QueuePolicy,
    #[serde(default = "default_queue_depth")]
    pub queue_depth: usize,
    /// Strategy readers use to split each step among themselves.
    #[serde(default)]
    pub strategy: StrategySpec,
    /// Rendezvous file; defaults to `<series>.contact.json`.
    #[serde(default)]
    pub contact_path: Option<PathBuf>,
    /// Writers per container file.
    #[serde(default = "default_one")]
    pub aggregation_group: usize,
    #[serde(default = "default_bind")]
    pub bind_address: String,
    /// Inclusive port range for data and control listeners; any free port when unset.
    #[serde(default)]
    pub port_range: Option<(u16, u16)>,
    #[serde(default = "default_timeout")]
    pub rendezvous_timeout_s: f64,
    /// Caps file engine write bandwidth, emulating a slow filesystem.
    #[serde(default)]
    pub throttle_bytes_per_s: Option<u64>,
}

fn default_queue_depth() -> usize {
    2
}

fn default_one() -> usize {
    1
}

fn default_bind() -> String {
    "127.0.0.1".into()
}

fn default_timeout() -> f64 {
    30.0
}

impl EngineConfig {
    pub fn stream() -> Self {
        Self::with_kind(EngineKind::Stream)
    }

    pub fn file() -> Self {
        Self::with_kind(EngineKind::File)
    }

    fn with_kind(engine: EngineKind) -> Self {
        Self {
            engine,
            queue_policy: QueuePolicy::default(),
            queue_depth: default_queue_depth(),
            strategy: StrategySpec::default(),
            contact_path: None,
            aggregation_group: 1,
            bind_address: default_bind(),
            port_range: None,
            rendezvous_timeout_s: default_timeout(),
            throttle_bytes_per_s: None,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_owned()));
        if self.queue_depth == 0 {
            return bad("queue_depth must be at least 1");
        }
        if self.aggregation_group == 0 {
            return bad("aggregation_group must be at least 1");
        }
        if let Some((lo, hi)) = self.port_range {
            if lo > hi {
                return bad("port_range is empty");
            }
        }
        if self.rendezvous_timeout_s.is_nan() || self.rendezvous_timeout_s <= 0.0 {
            return bad("rendezvous_timeout_s must be positive");
        }
        if self.throttle_bytes_per_s == Some(0) {
            return bad("throttle_bytes_per_s must be positive");
        }
        self.strategy
            .validate()
            .map_err(|e| EngineError::Config(e.to_string()))
    }

    pub fn from_json(doc: &str) -> Result<Self, EngineError> {
        let cfg: Self = serde_json::from_str(doc).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let doc = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&doc)
    }

    /// Loads the document named by `CHUNKSTREAM_CONFIG`, if set.
    pub fn from_env() -> Result<Option<Self>, EngineError> {
        match std::env::var_os(CONFIG_ENV) {
            Some(p) => Self::load(Path::new(&p)).map(Some),
            None => Ok(None),
        }
    }

    pub fn contact_path_for(&self, series: &str) -> PathBuf {
        self.contact_path
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("{series}.contact.json")))
    }

    pub(crate) fn rendezvous_timeout(&self) -> std::time::Duration {
        std::time::Duration::from_secs_f64(self.rendezvous_timeout_s)
    }
}
