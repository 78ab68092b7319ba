//! The user-facing gateway: REST API, credential authentication, and the
//! process entry points for every long-running role.

pub mod api;
pub mod auth;
pub mod http;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use cvmg_core::{Error, Result};

pub use api::Api;
pub use http::{router, spawn, status_for, ServerHandle, ROUTES};

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

/// The gateway server's configuration file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Path of the state-store file shared with the gateway agents.
    pub store: PathBuf,
    /// Pairing pin lifetime in seconds; 24 hours when absent.
    #[serde(default)]
    pub pairing_ttl_s: Option<u64>,
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::BadRequest(format!("server config: {e}")))
    }

    pub fn pairing_ttl(&self) -> Option<Duration> {
        self.pairing_ttl_s.map(Duration::from_secs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn server_config_defaults() {
        let cfg = ServerConfig::from_toml("store = \"state.json\"").unwrap();
        assert_eq!(cfg.listen, "127.0.0.1:8080");
        assert_eq!(cfg.pairing_ttl(), None);
        assert!(ServerConfig::from_toml("listen = \"0.0.0.0:1\"").is_err());
    }

    #[test]
    fn shipped_deploy_configs_parse() {
        use cvmg_core::cloud::CloudAgentConfig;
        use cvmg_core::gateway::GatewayAgentConfig;
        ServerConfig::from_toml(include_str!("../../../deploy/server.toml")).unwrap();
        let agent = GatewayAgentConfig::from_toml(include_str!("../../../deploy/agent.toml")).unwrap();
        let cloud = CloudAgentConfig::from_toml(include_str!("../../../deploy/cloud-a.toml")).unwrap();
        assert_eq!(agent.bus, cloud.bus);
        assert_eq!(cloud.descriptor().local_template("cernvm-3"), Some("tmpl-A-cernvm"));
    }
}
