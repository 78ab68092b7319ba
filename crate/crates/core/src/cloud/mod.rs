//! Cloud agents: admission control (ACL, soft quotas, image and offering
//! mappings) in front of a [`CloudDriver`], reachable over the bus.

mod agent;
mod descriptor;
mod driver;
pub mod protocol;
pub mod sim;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use agent::{Admission, CloudAgent, LifecycleAction};
pub use descriptor::{acl_allows, glob, AclAction, AclRule, CloudDescriptor, LocalFlavor, Quotas};
pub use driver::{CloudDriver, DriverState, Resources};
pub use protocol::{agent_bus_name, CapacityReport, CAPACITY_CHANNEL};

use crate::clock::SharedClock;
use crate::error::{Error, Result};
use sim::{SimConfig, SimulatedCloud};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DriverConfig {
    Simulated(SimConfig),
}

/// The cloud agent's configuration file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudAgentConfig {
    pub cloud_id: String,
    /// `host:port` of the bus broker.
    pub bus: String,
    pub quotas: Quotas,
    #[serde(default)]
    pub acl: Vec<AclRule>,
    #[serde(default)]
    pub image_map: BTreeMap<String, String>,
    #[serde(default)]
    pub offering_map: BTreeMap<String, String>,
    pub driver: DriverConfig,
}

impl CloudAgentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::BadRequest(format!("cloud agent config: {e}")))
    }

    pub fn descriptor(&self) -> CloudDescriptor {
        CloudDescriptor {
            cloud_id: self.cloud_id.clone(),
            quotas: self.quotas,
            acl: self.acl.clone(),
            image_map: self.image_map.clone(),
            offering_map: self.offering_map.clone(),
        }
    }

    pub fn build_driver(&self, clock: SharedClock) -> Arc<dyn CloudDriver> {
        match &self.driver {
            DriverConfig::Simulated(cfg) => Arc::new(SimulatedCloud::new(cfg.clone(), clock)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_agent_config() {
        let text = r#"
cloud_id = "A"
bus = "127.0.0.1:7070"
quotas = { max_instances = 10, max_cpus = 16, max_memory_mb = 32768 }
acl = [
  { action = "DENY", pattern = "user:eve" },
  { action = "ALLOW", pattern = "*" },
]

[image_map]
"cernvm-3" = "tmpl-41"

[offering_map]
"m1.small" = "small"

[driver]
kind = "simulated"
total_cpus = 16
total_memory_mb = 32768
start_latency_ms = 200
failure_script = [3]
flavors = { small = { cpus = 1, memory_mb = 2048 } }
credentials = { endpoint = "https://one.example.org:2633", access_key = "AK", secret_key = "SK" }
"#;
        let cfg = CloudAgentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.cloud_id, "A");
        assert_eq!(cfg.acl.len(), 2);
        assert_eq!(cfg.acl[0].action, AclAction::Deny);
        let DriverConfig::Simulated(sim) = &cfg.driver;
        assert_eq!(sim.flavors["small"].memory_mb, 2048);
        assert!(sim.failure_script.contains(&3));
        assert_eq!(cfg.descriptor().local_template("cernvm-3"), Some("tmpl-41"));
    }
}
