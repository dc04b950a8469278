//! Remote owner definitions, as read from TOML.
//!
//! ```toml
//! id = "operator"
//! seed = 7
//! purposes = ["telephony"]
//!
//! [[services]]
//! id = "ts-sim"
//! image = "sim service v1"
//! exports = ["sim.v1"]
//! ```

use std::collections::BTreeMap;

use mtm_core::crypto::SuiteId;
use mtm_core::engine::{ServiceKind, TrustedService};
use mtm_core::protocols::{AgentConfig, RemoteOwnerAgent};
use serde::{Deserialize, Serialize};

use crate::device::{manufacturer, DEFAULT_MANUFACTURER};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub id: String,
    pub image: String,
    #[serde(default)]
    pub exports: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OwnerSpec {
    pub id: String,
    pub seed: u64,
    #[serde(default = "default_manufacturer")]
    pub manufacturer: String,
    pub purposes: Vec<String>,
    #[serde(default)]
    pub quality_assertions: Vec<String>,
    #[serde(default)]
    pub services: Vec<ServiceSpec>,
    #[serde(default)]
    pub individualization: BTreeMap<String, String>,
    #[serde(default = "one")]
    pub policy_version: u32,
    #[serde(default = "one")]
    pub min_policy_version: u32,
}

fn default_manufacturer() -> String {
    DEFAULT_MANUFACTURER.to_owned()
}

fn one() -> u32 {
    1
}

impl OwnerSpec {
    pub fn new(id: &str, seed: u64, purposes: &[&str]) -> Self {
        Self {
            id: id.to_owned(),
            seed,
            manufacturer: default_manufacturer(),
            purposes: purposes.iter().map(|p| p.to_string()).collect(),
            quality_assertions: Vec::new(),
            services: Vec::new(),
            individualization: BTreeMap::new(),
            policy_version: 1,
            min_policy_version: 1,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data")
    }

    /// The owner's agent. Rebuilding from the same spec gives the same keys.
    pub fn agent(&self, suite: SuiteId) -> RemoteOwnerAgent {
        let purposes: Vec<&str> = self.purposes.iter().map(String::as_str).collect();
        let mut config = AgentConfig::new(&self.id, self.seed, &purposes);
        config.quality_assertions = self.quality_assertions.clone();
        config.services = self
            .services
            .iter()
            .map(|s| {
                let exports: Vec<&str> = s.exports.iter().map(String::as_str).collect();
                TrustedService::new(&s.id, ServiceKind::Trusted, s.image.as_bytes(), &exports)
            })
            .collect();
        config.individualization = self.individualization.clone();
        config.policy_version = self.policy_version;
        config.min_policy_version = self.min_policy_version;
        RemoteOwnerAgent::new(
            config,
            manufacturer(&self.manufacturer, suite).reference(),
            suite,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let spec = OwnerSpec::from_toml(
            "id = \"op\"\nseed = 3\npurposes = [\"telephony\"]\n[[services]]\nid = \"ts-x\"\nimage = \"x\"\n",
        )
        .unwrap();
        assert_eq!(spec.manufacturer, DEFAULT_MANUFACTURER);
        assert_eq!(spec.policy_version, 1);
        assert_eq!(OwnerSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        assert!(OwnerSpec::from_toml("id = \"op\"\nseed = 3\npurposes = []\nbogus = 1\n").is_err());
        let a = spec.agent(SuiteId::Toy);
        let b = spec.agent(SuiteId::Toy);
        assert_eq!(a.transport_public(), b.transport_public());
    }
}
