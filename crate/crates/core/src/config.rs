//! Service configuration: connectors, device registry, store and bridge settings.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::TopicFilter;
use crate::codecs::CodecSpec;
use crate::model::{Medium, TechnologyKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// One registered meter. The codec parameters sit next to `codec`, e.g.
/// `{"device_id": "g1", "technology": "sigfox", "codec": "pulse", "pulse_weight": 0.01}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceEntry {
    pub device_id: String,
    pub technology: TechnologyKind,
    #[serde(flatten)]
    pub codec: CodecSpec,
    /// Medium for codecs whose payload does not carry one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub medium: Option<Medium>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectorSpec {
    pub technology: TechnologyKind,
    /// HTTP path for callback-style ingest (LoRaWAN, Sigfox).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen: Option<String>,
    /// Bus filter for devices publishing directly (NB-IoT, Wi-SUN).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subscribe: Option<String>,
}

impl ConnectorSpec {
    pub fn is_http(&self) -> bool {
        matches!(self.technology, TechnologyKind::Lorawan | TechnologyKind::Sigfox)
    }

    pub fn listen_path(&self) -> String {
        self.listen
            .clone()
            .unwrap_or_else(|| format!("/ingest/{}", self.technology))
    }

    pub fn subscribe_filter(&self) -> String {
        self.subscribe
            .clone()
            .unwrap_or_else(|| format!("meterhub/ingest/{}/+", self.technology))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BridgeDirection {
    In,
    Out,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrokerConfig {
    /// `host:port` or `mqtt://host:port`.
    pub endpoint: String,
    #[serde(default)]
    pub direction: BridgeDirection,
    #[serde(default = "default_outbox_cap")]
    pub outbox_cap: usize,
}

fn default_outbox_cap() -> usize {
    10_000
}

fn default_http() -> String {
    "127.0.0.1:8080".to_string()
}

fn default_store() -> PathBuf {
    PathBuf::from("meterhub-data")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(default = "default_http")]
    pub http_listen: String,
    #[serde(default = "default_store")]
    pub store: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub broker: Option<BrokerConfig>,
    #[serde(default)]
    pub strict_crc: bool,
    pub connectors: Vec<ConnectorSpec>,
    #[serde(default)]
    pub devices: Vec<DeviceEntry>,
}

pub type Registry = HashMap<String, DeviceEntry>;

/// Build the device lookup table, rejecting duplicate ids.
pub fn build_registry(devices: &[DeviceEntry]) -> Result<Registry, ConfigError> {
    let mut registry = Registry::new();
    for d in devices {
        if d.device_id.is_empty() {
            return Err(ConfigError::Invalid("empty device_id".into()));
        }
        if let CodecSpec::Pulse { pulse_weight, .. } = d.codec {
            if !(pulse_weight.is_finite() && pulse_weight > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "device {}: pulse_weight must be positive",
                    d.device_id
                )));
            }
        }
        if registry.insert(d.device_id.clone(), d.clone()).is_some() {
            return Err(ConfigError::Invalid(format!("duplicate device_id {}", d.device_id)));
        }
    }
    Ok(registry)
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config, ConfigError> {
        let config: Config = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Load a config file. A relative `store` path is resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Config::from_json(&text)?;
        if config.store.is_relative() {
            if let Some(dir) = path.parent() {
                config.store = dir.join(&config.store);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.connectors.is_empty() {
            return Err(ConfigError::Invalid("at least one connector is required".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.connectors {
            if !seen.insert(c.technology) {
                return Err(ConfigError::Invalid(format!(
                    "more than one {} connector",
                    c.technology
                )));
            }
            if c.is_http() {
                if c.subscribe.is_some() {
                    return Err(ConfigError::Invalid(format!(
                        "{} connector takes `listen`, not `subscribe`",
                        c.technology
                    )));
                }
                if !c.listen_path().starts_with('/') {
                    return Err(ConfigError::Invalid(format!(
                        "{} listen path must start with /",
                        c.technology
                    )));
                }
            } else {
                if c.listen.is_some() {
                    return Err(ConfigError::Invalid(format!(
                        "{} connector takes `subscribe`, not `listen`",
                        c.technology
                    )));
                }
                TopicFilter::new(&c.subscribe_filter())
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
        }
        build_registry(&self.devices)?;
        if let Some(b) = &self.broker {
            if b.outbox_cap == 0 {
                return Err(ConfigError::Invalid("broker outbox_cap must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> Registry {
        build_registry(&self.devices).expect("validated config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Unit;

    const SAMPLE: &str = r#"{
        "connectors": [
            {"technology": "lorawan"},
            {"technology": "sigfox", "listen": "/cb/sigfox"},
            {"technology": "nbiot"}
        ],
        "devices": [
            {"device_id": "heat-1", "technology": "lorawan", "codec": "mbus"},
            {"device_id": "gas-1", "technology": "sigfox", "codec": "pulse", "pulse_weight": 0.01, "medium": "gas"},
            {"device_id": "356938035643809", "technology": "nbiot", "codec": "sml"}
        ]
    }"#;

    #[test]
    fn parses_sample() {
        let c = Config::from_json(SAMPLE).unwrap();
        assert_eq!(c.http_listen, "127.0.0.1:8080");
        assert_eq!(c.connectors[0].listen_path(), "/ingest/lorawan");
        assert_eq!(c.connectors[1].listen_path(), "/cb/sigfox");
        assert_eq!(c.connectors[2].subscribe_filter(), "meterhub/ingest/nbiot/+");
        let r = c.registry();
        assert_eq!(
            r["gas-1"].codec,
            CodecSpec::Pulse {
                pulse_weight: 0.01,
                weight_unit: Unit::M3
            }
        );
        assert_eq!(r["gas-1"].medium, Some(Medium::Gas));
    }

    #[test]
    fn duplicate_device_is_named() {
        let text = SAMPLE.replace("gas-1", "heat-1");
        let err = Config::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("duplicate device_id heat-1"), "{err}");
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(Config::from_json(r#"{"connectors": []}"#).is_err());
        assert!(Config::from_json(r#"{"connectors": [{"technology": "nbiot", "listen": "/x"}]}"#).is_err());
        assert!(Config::from_json(r#"{"connectors": [{"technology": "nbiot", "subscribe": "a/#/b"}]}"#).is_err());
        assert!(Config::from_json(r#"{"connectors": [{"technology": "lorawan"}, {"technology": "lorawan"}]}"#).is_err());
        assert!(Config::from_json(
            r#"{"connectors": [{"technology": "sigfox"}],
                "devices": [{"device_id": "g", "technology": "sigfox", "codec": "pulse", "pulse_weight": 0}]}"#
        )
        .is_err());
        assert!(Config::from_json(r#"{"connectors": [{"technology": "zigbee"}]}"#).is_err());
    }

    #[test]
    fn missing_file() {
        let err = Config::load(Path::new("/nonexistent/meterhub.json")).unwrap_err();
        assert!(matches!(err, ConfigError::Io { .. }));
    }
}
