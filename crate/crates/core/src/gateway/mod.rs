//! The gateway agent: claims queued requests, asks cloud agents for capacity,
//! places instances (overflowing into further clouds with replicated fixed
//! services when needed) and drives lifecycle calls on the owning cloud.

mod client;
mod orchestrator;
pub mod placement;
mod worker;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use client::CloudClient;
pub use orchestrator::{AgentSettings, DeployReport, Orchestrator, StepOutcome, StepStatus};
pub use placement::{plan_create, plan_scale, PlacementPlan, PlanStep, ScalePlan};
pub use worker::{Failure, Processed, RequestHandler, Worker, WorkerConfig};

use crate::error::{Error, Result};

fn default_lease_ms() -> u64 {
    60_000
}

fn default_poll_ms() -> u64 {
    1_000
}

fn default_replan_limit() -> u32 {
    1
}

fn default_bus_timeout_ms() -> u64 {
    10_000
}

fn default_readiness_timeout_ms() -> u64 {
    120_000
}

/// The gateway agent's configuration file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayAgentConfig {
    /// Path of the state-store file shared with the server.
    pub store: PathBuf,
    /// `host:port` of the bus broker.
    pub bus: String,
    pub name: String,
    #[serde(default = "default_lease_ms")]
    pub lease_ms: u64,
    #[serde(default = "default_poll_ms")]
    pub poll_interval_ms: u64,
    #[serde(default = "default_replan_limit")]
    pub replan_limit: u32,
    #[serde(default = "default_bus_timeout_ms")]
    pub bus_timeout_ms: u64,
    #[serde(default = "default_readiness_timeout_ms")]
    pub readiness_timeout_ms: u64,
}

impl GatewayAgentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::BadRequest(format!("gateway agent config: {e}")))
    }

    pub fn worker(&self) -> WorkerConfig {
        WorkerConfig {
            name: self.name.clone(),
            lease: Duration::from_millis(self.lease_ms),
            poll_interval: Duration::from_millis(self.poll_interval_ms),
        }
    }

    pub fn settings(&self) -> AgentSettings {
        AgentSettings {
            bus_timeout: Duration::from_millis(self.bus_timeout_ms),
            readiness_timeout: Duration::from_millis(self.readiness_timeout_ms),
            replan_limit: self.replan_limit,
            ..AgentSettings::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults() {
        let cfg = GatewayAgentConfig::from_toml("store = \"/var/lib/cvmg/state.json\"\nbus = \"127.0.0.1:7070\"\nname = \"gw-1\"\n").unwrap();
        assert_eq!(cfg.worker().lease, Duration::from_secs(60));
        assert_eq!(cfg.worker().poll_interval, Duration::from_secs(1));
        assert_eq!(cfg.settings().replan_limit, 1);
        assert_eq!(cfg.settings().bus_timeout, Duration::from_secs(10));
        assert!(GatewayAgentConfig::from_toml("name = \"x\"").is_err());
    }
}
