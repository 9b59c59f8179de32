//! Deployment configuration and scenario scripts: one structured file
//! each (TOML, with JSON accepted interchangeably), validated until
//! every reference resolves.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::border::PayloadMode;
use crate::core::{LinkType, NodeId};
use crate::crypto::{Kdf, SuiteRegistry};

#[derive(Debug, Error)]
#[error("config error at {path}: {reason}")]
pub struct ConfigError {
    pub path: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

fn default_key_len() -> u32 {
    32
}

fn default_rate() -> u64 {
    256
}

fn default_validity_s() -> u64 {
    3600
}

fn default_ack_timeout_ms() -> u64 {
    10_000
}

fn default_block_size() -> u32 {
    50
}

fn default_block_interval_ms() -> u64 {
    2_500
}

fn default_ttl_ms() -> u64 {
    30_000
}

fn default_bridge_tick_ms() -> u64 {
    250
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    #[serde(default = "default_validity_s")]
    pub validity_s: u64,
    #[serde(default = "default_ack_timeout_ms")]
    pub ack_timeout_ms: u64,
    #[serde(default = "default_bridge_tick_ms")]
    pub bridge_tick_ms: u64,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            validity_s: default_validity_s(),
            ack_timeout_ms: default_ack_timeout_ms(),
            bridge_tick_ms: default_bridge_tick_ms(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    pub nodes: Vec<String>,
    #[serde(default)]
    pub border_nodes: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub id: String,
    #[serde(default)]
    pub latency_ms: f64,
    #[serde(default)]
    pub jitter_ms: f64,
    #[serde(default)]
    pub bandwidth_bps: Option<u64>,
    #[serde(default)]
    pub loss_before_retry: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub id: String,
    pub a: String,
    pub b: String,
    pub link_type: LinkType,
    #[serde(default = "default_rate")]
    pub rate_bps: u64,
    #[serde(default = "default_key_len")]
    pub key_len: u32,
    pub kem: String,
    pub sig: String,
    pub channel: String,
    #[serde(default)]
    pub sc_tags: Vec<String>,
}

/// One border interconnection. `method` selects which of the other
/// fields apply; validation enforces the shape per method.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BorderPairConfig {
    pub name: String,
    pub method: u8,
    pub a: String,
    pub b: String,
    /// Method 1: the two independent links bridging a and b.
    #[serde(default)]
    pub links: Vec<String>,
    /// Methods 1-3: the channel carrying relay traffic (and, for 2-3,
    /// the exchange itself).
    #[serde(default)]
    pub channel: Option<String>,
    /// Methods 2-3: emission rate of the exchange.
    #[serde(default = "default_rate")]
    pub rate_bps: u64,
    #[serde(default = "default_key_len")]
    pub key_len: u32,
    /// Methods 2-3: two distinct [kem, sig] pairs.
    #[serde(default)]
    pub suites: Vec<[String; 2]>,
    /// Method 2: identifier of the emulated link.
    #[serde(default)]
    pub link_id: Option<String>,
    /// Method 3 payload carriage.
    #[serde(default)]
    pub mode: Option<PayloadMode>,
    #[serde(default)]
    pub sc_tags: Vec<String>,
    // method 4
    #[serde(default)]
    pub ground_channel: Option<String>,
    #[serde(default)]
    pub space_channel: Option<String>,
    #[serde(default)]
    pub ground_suite: Option<[String; 2]>,
    #[serde(default)]
    pub space_suite: Option<[String; 2]>,
    #[serde(default = "default_block_size")]
    pub block_size: u32,
    #[serde(default = "default_block_interval_ms")]
    pub block_interval_ms: u64,
    #[serde(default = "default_ttl_ms")]
    pub ttl_ms: u64,
    #[serde(default)]
    pub psk: Option<String>,
    #[serde(default)]
    pub kdf: Option<Kdf>,
    #[serde(default)]
    pub ground_sc_tags: Vec<String>,
    #[serde(default)]
    pub space_sc_tags: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub defaults: Defaults,
    pub domains: Vec<DomainConfig>,
    /// Groups of domains managed by one controller, e.g. a unified
    /// controller spanning a metro segment and a remote link.
    #[serde(default)]
    pub merged_controllers: Vec<Vec<String>>,
    pub channels: Vec<ChannelConfig>,
    #[serde(default)]
    pub links: Vec<LinkConfig>,
    #[serde(default)]
    pub border_pairs: Vec<BorderPairConfig>,
    /// Named pre-shared keys, hex-encoded.
    #[serde(default)]
    pub psks: BTreeMap<String, String>,
    /// Extra side-channel tags per suite name.
    #[serde(default)]
    pub suite_tags: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub duration_ms: u64,
    #[serde(default)]
    pub actions: Vec<TimedAction>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TimedAction {
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    RequestE2eKey {
        source: String,
        destination: String,
        #[serde(default = "default_key_len")]
        length: u32,
    },
    Kill {
        channel: String,
    },
    Heal {
        channel: String,
    },
    /// Fetch keys through the 014-style interface of one node's store.
    Drain {
        node: String,
        peer: String,
        #[serde(default = "default_one")]
        count: u32,
        #[serde(default = "default_key_len")]
        size: u32,
    },
}

fn default_one() -> u32 {
    1
}

fn parse_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new(path.display().to_string(), e.to_string()))?;
    let is_json = path.extension().is_some_and(|ext| ext == "json");
    let parsed = if is_json {
        serde_json::from_str(&raw).map_err(|e| e.to_string())
    } else {
        toml::from_str(&raw).map_err(|e| e.to_string())
    };
    parsed.map_err(|reason| ConfigError::new(path.display().to_string(), reason))
}

impl DeploymentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        parse_file(path)
    }

    /// Every declared node, as `domain/name`.
    pub fn all_nodes(&self) -> Result<BTreeSet<NodeId>, ConfigError> {
        let mut out = BTreeSet::new();
        for (i, d) in self.domains.iter().enumerate() {
            for n in &d.nodes {
                let node = NodeId::new(&d.name, n).map_err(|e| {
                    ConfigError::new(format!("domains[{i}].nodes"), e.to_string())
                })?;
                if !out.insert(node.clone()) {
                    return Err(ConfigError::new(
                        format!("domains[{i}].nodes"),
                        format!("duplicate node {node}"),
                    ));
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self, registry: &SuiteRegistry) -> Result<(), ConfigError> {
        let nodes = self.all_nodes()?;
        let node_ref = |path: String, s: &str| -> Result<NodeId, ConfigError> {
            let id: NodeId = s.parse().map_err(|e: crate::core::ValidationError| {
                ConfigError::new(path.clone(), e.to_string())
            })?;
            if !nodes.contains(&id) {
                return Err(ConfigError::new(path, format!("unknown node '{s}'")));
            }
            Ok(id)
        };

        let mut channels = BTreeSet::new();
        for (i, ch) in self.channels.iter().enumerate() {
            if !channels.insert(ch.id.as_str()) {
                return Err(ConfigError::new(
                    format!("channels[{i}].id"),
                    format!("duplicate channel '{}'", ch.id),
                ));
            }
            if !(0.0..1.0).contains(&ch.loss_before_retry) {
                return Err(ConfigError::new(
                    format!("channels[{i}].loss_before_retry"),
                    "must be in [0, 1)",
                ));
            }
            if ch.latency_ms < 0.0 || ch.jitter_ms < 0.0 {
                return Err(ConfigError::new(
                    format!("channels[{i}]"),
                    "latency and jitter must be non-negative",
                ));
            }
            if ch.bandwidth_bps == Some(0) {
                return Err(ConfigError::new(
                    format!("channels[{i}].bandwidth_bps"),
                    "must be positive (omit for unlimited)",
                ));
            }
        }
        let channel_ref = |path: String, id: &str| -> Result<(), ConfigError> {
            if channels.contains(id) {
                Ok(())
            } else {
                Err(ConfigError::new(path, format!("unknown channel '{id}'")))
            }
        };

        for (i, d) in self.domains.iter().enumerate() {
            for b in &d.border_nodes {
                if !d.nodes.contains(b) {
                    return Err(ConfigError::new(
                        format!("domains[{i}].border_nodes"),
                        format!("'{b}' is not a node of domain '{}'", d.name),
                    ));
                }
            }
        }
        let domain_names: BTreeSet<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        if domain_names.len() != self.domains.len() {
            return Err(ConfigError::new("domains", "duplicate domain name"));
        }
        for (i, group) in self.merged_controllers.iter().enumerate() {
            for name in group {
                if !domain_names.contains(name.as_str()) {
                    return Err(ConfigError::new(
                        format!("merged_controllers[{i}]"),
                        format!("unknown domain '{name}'"),
                    ));
                }
            }
        }

        let mut link_ids = BTreeMap::new();
        for (i, l) in self.links.iter().enumerate() {
            let id: crate::core::LinkId =
                l.id.parse().map_err(|e: crate::core::ValidationError| {
                    ConfigError::new(format!("links[{i}].id"), e.to_string())
                })?;
            if link_ids.insert(id, i).is_some() {
                return Err(ConfigError::new(
                    format!("links[{i}].id"),
                    format!("duplicate link id '{}'", l.id),
                ));
            }
            let a = node_ref(format!("links[{i}].a"), &l.a)?;
            let b = node_ref(format!("links[{i}].b"), &l.b)?;
            if a == b {
                return Err(ConfigError::new(
                    format!("links[{i}]"),
                    "endpoints must differ",
                ));
            }
            channel_ref(format!("links[{i}].channel"), &l.channel)?;
            registry
                .kem(&l.kem)
                .map_err(|e| ConfigError::new(format!("links[{i}].kem"), e.to_string()))?;
            registry
                .sig(&l.sig)
                .map_err(|e| ConfigError::new(format!("links[{i}].sig"), e.to_string()))?;
        }

        let mut pair_names = BTreeSet::new();
        for (i, p) in self.border_pairs.iter().enumerate() {
            let at = |field: &str| format!("border_pairs[{i}].{field}");
            if !pair_names.insert(p.name.as_str()) {
                return Err(ConfigError::new(at("name"), "duplicate pair name"));
            }
            let a = node_ref(at("a"), &p.a)?;
            let b = node_ref(at("b"), &p.b)?;
            if a == b {
                return Err(ConfigError::new(at("b"), "endpoints must differ"));
            }
            let check_suites = |suites: &[[String; 2]], path: String| -> Result<(), ConfigError> {
                if suites.len() != 2 {
                    return Err(ConfigError::new(
                        path,
                        "exactly two [kem, sig] pairs required",
                    ));
                }
                // Independence demands genuinely different algorithms.
                if suites[0][0] == suites[1][0] || suites[0][1] == suites[1][1] {
                    return Err(ConfigError::new(path, "suites must differ"));
                }
                for s in suites {
                    registry
                        .kem(&s[0])
                        .map_err(|e| ConfigError::new(path.clone(), e.to_string()))?;
                    registry
                        .sig(&s[1])
                        .map_err(|e| ConfigError::new(path.clone(), e.to_string()))?;
                }
                Ok(())
            };
            match p.method {
                1 => {
                    if p.links.len() != 2 || p.links[0] == p.links[1] {
                        return Err(ConfigError::new(
                            at("links"),
                            "method 1 needs two distinct links",
                        ));
                    }
                    for lid in &p.links {
                        let id: crate::core::LinkId =
                            lid.parse().map_err(|e: crate::core::ValidationError| {
                                ConfigError::new(at("links"), e.to_string())
                            })?;
                        let Some(&li) = link_ids.get(&id) else {
                            return Err(ConfigError::new(
                                at("links"),
                                format!("unknown link '{lid}'"),
                            ));
                        };
                        let l = &self.links[li];
                        let la = node_ref(format!("links[{li}].a"), &l.a)?;
                        let lb = node_ref(format!("links[{li}].b"), &l.b)?;
                        if !((la == a && lb == b) || (la == b && lb == a)) {
                            return Err(ConfigError::new(
                                at("links"),
                                format!("link '{lid}' does not connect {a} and {b}"),
                            ));
                        }
                    }
                    let ch = p.channel.as_deref().ok_or_else(|| {
                        ConfigError::new(at("channel"), "method 1 needs a relay channel")
                    })?;
                    channel_ref(at("channel"), ch)?;
                }
                2 | 3 => {
                    let ch = p.channel.as_deref().ok_or_else(|| {
                        ConfigError::new(at("channel"), "methods 2 and 3 need a channel")
                    })?;
                    channel_ref(at("channel"), ch)?;
                    check_suites(&p.suites, at("suites"))?;
                    if p.method == 2 {
                        let lid = p.link_id.as_deref().ok_or_else(|| {
                            ConfigError::new(at("link_id"), "method 2 needs an emulated link id")
                        })?;
                        let id: crate::core::LinkId =
                            lid.parse().map_err(|e: crate::core::ValidationError| {
                                ConfigError::new(at("link_id"), e.to_string())
                            })?;
                        if link_ids.contains_key(&id) {
                            return Err(ConfigError::new(
                                at("link_id"),
                                "collides with a declared link",
                            ));
                        }
                    }
                }
                4 => {
                    let g = p.ground_channel.as_deref().ok_or_else(|| {
                        ConfigError::new(at("ground_channel"), "method 4 needs a ground channel")
                    })?;
                    let s = p.space_channel.as_deref().ok_or_else(|| {
                        ConfigError::new(at("space_channel"), "method 4 needs a space channel")
                    })?;
                    channel_ref(at("ground_channel"), g)?;
                    channel_ref(at("space_channel"), s)?;
                    if g == s {
                        return Err(ConfigError::new(
                            at("space_channel"),
                            "paths must be disjoint channels",
                        ));
                    }
                    let (Some(gs), Some(ss)) = (&p.ground_suite, &p.space_suite) else {
                        return Err(ConfigError::new(
                            at("ground_suite"),
                            "method 4 needs ground_suite and space_suite",
                        ));
                    };
                    check_suites(&[ss.clone(), gs.clone()], at("suites"))?;
                    if !(1..=100).contains(&p.block_size) {
                        return Err(ConfigError::new(at("block_size"), "must be in [1, 100]"));
                    }
                    if let Some(psk) = &p.psk {
                        let hexed = self.psks.get(psk).ok_or_else(|| {
                            ConfigError::new(at("psk"), format!("unknown psk '{psk}'"))
                        })?;
                        let bytes = hex::decode(hexed)
                            .map_err(|e| ConfigError::new(format!("psks.{psk}"), e.to_string()))?;
                        if bytes.len() > crate::crypto::MAX_PSK_LEN {
                            return Err(ConfigError::new(
                                format!("psks.{psk}"),
                                "longer than 64 bytes",
                            ));
                        }
                    }
                }
                other => {
                    return Err(ConfigError::new(
                        at("method"),
                        format!("unknown method {other}; expected 1-4"),
                    ));
                }
            }
        }
        Ok(())
    }
}

impl Script {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        parse_file(path)
    }

    pub fn validate(&self, config: &DeploymentConfig) -> Result<(), ConfigError> {
        let nodes = config.all_nodes()?;
        let channels: BTreeSet<&str> = config.channels.iter().map(|c| c.id.as_str()).collect();
        let check_node = |path: String, s: &str| -> Result<(), ConfigError> {
            let id: NodeId = s.parse().map_err(|e: crate::core::ValidationError| {
                ConfigError::new(path.clone(), e.to_string())
            })?;
            if !nodes.contains(&id) {
                return Err(ConfigError::new(path, format!("unknown node '{s}'")));
            }
            Ok(())
        };
        for (i, a) in self.actions.iter().enumerate() {
            let at = |field: &str| format!("actions[{i}].{field}");
            if a.at_ms > self.duration_ms {
                return Err(ConfigError::new(at("at_ms"), "beyond script duration"));
            }
            match &a.action {
                Action::RequestE2eKey {
                    source,
                    destination,
                    length,
                } => {
                    check_node(at("source"), source)?;
                    check_node(at("destination"), destination)?;
                    if source == destination {
                        return Err(ConfigError::new(
                            at("destination"),
                            "source and destination must differ",
                        ));
                    }
                    if !(crate::core::MIN_KEY_LEN..=crate::core::MAX_KEY_LEN)
                        .contains(&(*length as usize))
                    {
                        return Err(ConfigError::new(at("length"), "outside [16, 4096]"));
                    }
                }
                Action::Kill { channel } | Action::Heal { channel } => {
                    if !channels.contains(channel.as_str()) {
                        return Err(ConfigError::new(
                            at("channel"),
                            format!("unknown channel '{channel}'"),
                        ));
                    }
                }
                Action::Drain { node, peer, .. } => {
                    check_node(at("node"), node)?;
                    check_node(at("peer"), peer)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
seed = 7

[[domains]]
name = "d1"
nodes = ["a", "b"]
border_nodes = ["b"]

[[domains]]
name = "d2"
nodes = ["c"]
border_nodes = ["c"]

[[channels]]
id = "ch1"
latency_ms = 5.0

[[channels]]
id = "xch"

[[links]]
id = "11111111-1111-1111-1111-111111111111"
a = "d1/a"
b = "d1/b"
link_type = "qkd"
rate_bps = 256
key_len = 32
kem = "kem-a"
sig = "sig-a"
channel = "ch1"
sc_tags = ["det"]

[[border_pairs]]
name = "m3:d1-d2"
method = 3
a = "d1/b"
b = "d2/c"
channel = "xch"
suites = [["kem-a", "sig-a"], ["kem-b", "sig-b"]]
"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_and_validates() {
        let cfg: DeploymentConfig = toml::from_str(&minimal_toml()).unwrap();
        cfg.validate(&SuiteRegistry::with_test_suites()).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.border_pairs[0].rate_bps, 256);
    }

    #[test]
    fn same_suite_twice_rejected() {
        let toml_src = minimal_toml().replace(
            r#"suites = [["kem-a", "sig-a"], ["kem-b", "sig-b"]]"#,
            r#"suites = [["kem-a", "sig-a"], ["kem-a", "sig-b"]]"#,
        );
        let cfg: DeploymentConfig = toml::from_str(&toml_src).unwrap();
        let err = cfg.validate(&SuiteRegistry::with_test_suites()).unwrap_err();
        assert!(err.path.contains("border_pairs[0].suites"), "{err}");
    }

    #[test]
    fn unknown_node_named_with_path() {
        let toml_src = minimal_toml().replace(r#"a = "d1/a""#, r#"a = "d1/ghost""#);
        let cfg: DeploymentConfig = toml::from_str(&toml_src).unwrap();
        let err = cfg.validate(&SuiteRegistry::with_test_suites()).unwrap_err();
        assert!(err.path.starts_with("links[0]"), "{err}");
    }

    #[test]
    fn json_is_accepted_interchangeably() {
        let json = r#"{
            "domains": [{"name": "d", "nodes": ["n1", "n2"]}],
            "channels": [{"id": "c"}],
            "links": [],
            "border_pairs": []
        }"#;
        let cfg: DeploymentConfig = serde_json::from_str(json).unwrap();
        cfg.validate(&SuiteRegistry::with_test_suites()).unwrap();
    }

    #[test]
    fn script_parses_and_validates() {
        let cfg: DeploymentConfig = toml::from_str(&minimal_toml()).unwrap();
        let script: Script = toml::from_str(
            r#"
duration_ms = 10000

[[actions]]
at_ms = 1000
action = "request_e2e_key"
source = "d1/a"
destination = "d2/c"
length = 32

[[actions]]
at_ms = 2000
action = "kill"
channel = "xch"

[[actions]]
at_ms = 3000
action = "drain"
node = "d1/a"
peer = "d1/b"
count = 2
"#,
        )
        .unwrap();
        script.validate(&cfg).unwrap();
        assert_eq!(script.actions.len(), 3);
    }

    #[test]
    fn script_rejects_unknown_channel() {
        let cfg: DeploymentConfig = toml::from_str(&minimal_toml()).unwrap();
        let script: Script = toml::from_str(
            r#"
duration_ms = 10
[[actions]]
at_ms = 1
action = "kill"
channel = "nope"
"#,
        )
        .unwrap();
        let err = script.validate(&cfg).unwrap_err();
        assert!(err.path.contains("actions[0]"), "{err}");
    }
}
