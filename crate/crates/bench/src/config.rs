//! Scenario documents (TOML) and their validation.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use bridgebench_core::broker::SessionConfig;
use bridgebench_core::codec::QoS;
use bridgebench_core::netem::{LinkProfile, ProfileError};
use bridgebench_core::topics::{TopicError, TopicName};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bridge::{Aut, RepublishMode, TopicMap, TopicScheme, TransformMode, UnifyRatio};
use crate::loadgen::{Cycling, GatewaySpec, HubSpec, ProviderSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
    #[error("link class {class}: {source}")]
    Link { class: &'static str, source: ProfileError },
    #[error(transparent)]
    Topic(#[from] TopicError),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Retry limit that may be spelled `"unbounded"` in the document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RetryLimit(pub Option<u32>);

impl Serialize for RetryLimit {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            Some(n) => s.serialize_u32(n),
            None => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for RetryLimit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u32),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(RetryLimit(Some(n))),
            Raw::S(s) if s == "unbounded" => Ok(RetryLimit(None)),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "expected a count or \"unbounded\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HubConfig {
    pub id: String,
    pub payload_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub id: String,
    /// Batches per second.
    pub rate: f64,
    pub hubs: Vec<HubConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub id: String,
    pub gateways: Vec<GatewayConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientSettings {
    pub keep_alive: u16,
    pub ack_timeout_ms: u64,
    pub connect_timeout_ms: u64,
    pub connect_attempts: u32,
    pub max_retries: RetryLimit,
}

impl Default for ClientSettings {
    fn default() -> Self {
        Self {
            keep_alive: 60,
            ack_timeout_ms: 1000,
            connect_timeout_ms: 5000,
            connect_attempts: 3,
            max_retries: RetryLimit(Some(10)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrokerSettings {
    pub queue_capacity: usize,
    pub max_inflight: usize,
    pub retry_interval_ms: u64,
    pub max_retries: RetryLimit,
}

impl Default for BrokerSettings {
    fn default() -> Self {
        let s = SessionConfig::default();
        Self {
            queue_capacity: s.queue_capacity,
            max_inflight: s.max_inflight,
            retry_interval_ms: s.retry_interval.as_millis() as u64,
            max_retries: RetryLimit(s.max_retries),
        }
    }
}

impl BrokerSettings {
    pub fn session(&self) -> SessionConfig {
        SessionConfig {
            retry_interval: Duration::from_millis(self.retry_interval_ms),
            max_retries: self.max_retries.0,
            queue_capacity: self.queue_capacity,
            max_inflight: self.max_inflight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeSettings {
    pub transform: TransformMode,
    pub unify_ratio: BTreeMap<String, UnifyRatio>,
    pub output_prefix: String,
    /// CPU cores shared by all bridges of a deployment.
    pub cpu_cores_total: f64,
    /// Processing cost per inbound byte on a full core.
    pub ns_per_byte: f64,
    pub queue_capacity: usize,
}

impl Default for BridgeSettings {
    fn default() -> Self {
        Self {
            transform: TransformMode::Unify,
            unify_ratio: BTreeMap::new(),
            output_prefix: "unified".into(),
            cpu_cores_total: 1.0,
            ns_per_byte: 0.0,
            queue_capacity: 10_000,
        }
    }
}

/// Impairment per link class. Gateway links connect gateways to source
/// brokers; bridge links connect bridges to both broker sides; the
/// subscriber link connects the measuring subscriber.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LinkClasses {
    pub gateway: LinkProfile,
    pub bridge: LinkProfile,
    pub subscriber: LinkProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub aut: Aut,
    pub topic_scheme: TopicScheme,
    pub qos: QoS,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    pub seed: u64,
    pub messages_per_hub: u32,
    #[serde(default)]
    pub republish_mode: RepublishMode,
    #[serde(default)]
    pub cycling: Cycling,
    /// First topic level of every hub topic.
    #[serde(default = "default_root")]
    pub topic_root: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Quiet period that ends a repetition once gateways are done.
    #[serde(default = "default_grace")]
    pub grace_ms: u64,
    /// Upper bound on a repetition's drain phase.
    #[serde(default = "default_max_drain")]
    pub max_drain_s: u64,
    #[serde(default)]
    pub client: ClientSettings,
    #[serde(default)]
    pub broker: BrokerSettings,
    #[serde(default)]
    pub bridge: BridgeSettings,
    #[serde(default)]
    pub links: LinkClasses,
    pub providers: Vec<ProviderConfig>,
}

fn default_repetitions() -> u32 {
    10
}

fn default_root() -> String {
    "sensors".into()
}

fn default_grace() -> u64 {
    5000
}

fn default_max_drain() -> u64 {
    600
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.repetitions == 0 {
            return Err(invalid("repetitions must be at least 1"));
        }
        if self.providers.is_empty() {
            return Err(invalid("no providers"));
        }
        if self.aut == Aut::PerHub && self.topic_scheme == TopicScheme::Wildcard {
            return Err(invalid(
                "AUT 2 maps one bridge per hub and cannot use wildcard subscriptions",
            ));
        }
        for (class, l) in [
            ("gateway", &self.links.gateway),
            ("bridge", &self.links.bridge),
            ("subscriber", &self.links.subscriber),
        ] {
            l.validate().map_err(|source| ConfigError::Link { class, source })?;
        }
        if self.bridge.cpu_cores_total <= 0.0 || self.bridge.ns_per_byte < 0.0 {
            return Err(invalid("bridge CPU model needs cores > 0 and ns_per_byte >= 0"));
        }
        if self.bridge.output_prefix == self.topic_root {
            return Err(invalid("bridge output prefix equals the hub topic root"));
        }
        if self.client.connect_attempts == 0 {
            return Err(invalid("connect_attempts must be at least 1"));
        }
        let mut ids = std::collections::HashSet::new();
        for p in &self.providers {
            if p.gateways.is_empty() {
                return Err(invalid(format!("provider {} has no gateways", p.id)));
            }
            for g in &p.gateways {
                if !(g.rate > 0.0 && g.rate.is_finite()) {
                    return Err(invalid(format!("gateway {}/{} needs rate > 0", p.id, g.id)));
                }
                if g.hubs.is_empty() {
                    return Err(invalid(format!("gateway {}/{} has no hubs", p.id, g.id)));
                }
                for h in &g.hubs {
                    if !ids.insert(self.hub_topic(&p.id, &g.id, &h.id)) {
                        return Err(invalid(format!("duplicate hub {}/{}/{}", p.id, g.id, h.id)));
                    }
                    TopicName::new(self.hub_topic(&p.id, &g.id, &h.id))?;
                }
            }
        }
        Ok(())
    }

    pub fn hub_topic(&self, provider: &str, gateway: &str, hub: &str) -> String {
        format!("{}/{provider}/{gateway}/{hub}", self.topic_root)
    }

    pub fn output_map(&self) -> TopicMap {
        TopicMap {
            from: self.topic_root.clone(),
            to: self.bridge.output_prefix.clone(),
        }
    }

    pub fn provider_specs(&self) -> Result<Vec<ProviderSpec>, ConfigError> {
        self.providers
            .iter()
            .map(|p| {
                let gateways = p
                    .gateways
                    .iter()
                    .map(|g| {
                        let hubs = g
                            .hubs
                            .iter()
                            .map(|h| {
                                Ok(HubSpec {
                                    id: h.id.clone(),
                                    payload_size: h.payload_size,
                                    topic: TopicName::new(self.hub_topic(&p.id, &g.id, &h.id))?,
                                    seed: self.seed,
                                })
                            })
                            .collect::<Result<Vec<_>, ConfigError>>()?;
                        Ok(GatewaySpec {
                            id: format!("{}/{}", p.id, g.id),
                            provider: p.id.clone(),
                            hubs,
                            rate: g.rate,
                            messages_per_hub: self.messages_per_hub,
                            cycling: self.cycling,
                        })
                    })
                    .collect::<Result<Vec<_>, ConfigError>>()?;
                Ok(ProviderSpec {
                    id: p.id.clone(),
                    gateways,
                })
            })
            .collect()
    }

    pub fn total_messages(&self) -> u64 {
        self.providers
            .iter()
            .flat_map(|p| &p.gateways)
            .map(|g| g.hubs.len() as u64 * u64::from(self.messages_per_hub))
            .sum()
    }

    /// Short stable hash of the whole scenario, written next to results.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}
