use serde::{Deserialize, Serialize};

use super::LocalFlavor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DriverState {
    Starting,
    Running,
    Paused,
    Destroyed,
}

/// CPU and memory a flavor occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Resources {
    pub cpus: u32,
    pub memory_mb: u64,
}

/// Uniform lifecycle interface over one cloud API.
///
/// `destroy` is idempotent, and `status` reflects the last call that
/// succeeded.
pub trait CloudDriver: Send + Sync {
    fn start(&self, template: &str, flavor: &LocalFlavor, user_data: &str) -> Result<String>;
    fn pause(&self, driver_ref: &str) -> Result<()>;
    fn resume(&self, driver_ref: &str) -> Result<()>;
    fn destroy(&self, driver_ref: &str) -> Result<()>;
    fn status(&self, driver_ref: &str) -> Result<DriverState>;
    /// How many more instances of `flavor` fit right now.
    fn capacity(&self, flavor: &LocalFlavor) -> Result<u32>;
    /// Size of a compute flavor, `None` when the driver does not offer it.
    fn flavor_resources(&self, compute: &str) -> Option<Resources>;
}
