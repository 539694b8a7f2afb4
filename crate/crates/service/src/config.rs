use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const DEFAULT_SUPPRESSION_THRESHOLD: usize = 20;
pub const DEFAULT_MAX_PAYLOAD_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    /// Group file (JSONL) holding every dimension the service may join on.
    pub store_path: Option<PathBuf>,
    /// Append-only audit log. In-memory only when unset.
    pub audit_path: Option<PathBuf>,
    /// Uploaded datasets are written here when set.
    pub dataset_dir: Option<PathBuf>,
    pub suppression_threshold: usize,
    pub max_payload_bytes: usize,
    /// When set, every request must carry `Authorization: Bearer <token>`.
    pub caller_token: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            store_path: None,
            audit_path: None,
            dataset_dir: None,
            suppression_threshold: DEFAULT_SUPPRESSION_THRESHOLD,
            max_payload_bytes: DEFAULT_MAX_PAYLOAD_BYTES,
            caller_token: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    /// File settings (if any), then `EQT_*` environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ServiceError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml_str(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ServiceError> {
        let number = |key: &str, v: String| {
            v.parse::<usize>()
                .map_err(|_| ServiceError::Config(format!("{key}: expected a non-negative integer, got `{v}`")))
        };
        if let Some(v) = get("EQT_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = get("EQT_STORE_PATH") {
            self.store_path = Some(v.into());
        }
        if let Some(v) = get("EQT_AUDIT_PATH") {
            self.audit_path = Some(v.into());
        }
        if let Some(v) = get("EQT_DATASET_DIR") {
            self.dataset_dir = Some(v.into());
        }
        if let Some(v) = get("EQT_SUPPRESSION_THRESHOLD") {
            self.suppression_threshold = number("EQT_SUPPRESSION_THRESHOLD", v)?;
        }
        if let Some(v) = get("EQT_MAX_PAYLOAD_BYTES") {
            self.max_payload_bytes = number("EQT_MAX_PAYLOAD_BYTES", v)?;
        }
        if let Some(v) = get("EQT_CALLER_TOKEN") {
            self.caller_token = Some(v);
        }
        Ok(())
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ServiceError> {
        self.listen
            .parse()
            .map_err(|_| ServiceError::Config(format!("listen: `{}` is not a socket address", self.listen)))
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    #[test]
    fn env_overrides_file() {
        let mut cfg = ServiceConfig::from_toml_str("listen = \"0.0.0.0:9000\"\nsuppression_threshold = 5\n").unwrap();
        let env: HashMap<&str, &str> = [("EQT_SUPPRESSION_THRESHOLD", "11"), ("EQT_CALLER_TOKEN", "t")].into();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(cfg.suppression_threshold, 11);
        assert_eq!(cfg.caller_token.as_deref(), Some("t"));
        assert_eq!(cfg.max_payload_bytes, DEFAULT_MAX_PAYLOAD_BYTES);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_numbers() {
        assert!(ServiceConfig::from_toml_str("threshold = 3").is_err());
        let mut cfg = ServiceConfig::default();
        let err = cfg.apply_env(|k| (k == "EQT_MAX_PAYLOAD_BYTES").then(|| "lots".to_string()));
        assert_eq!(err.unwrap_err().code(), "INVALID_CONFIG");
    }
}
