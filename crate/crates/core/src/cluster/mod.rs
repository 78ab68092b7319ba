//! Virtual cluster blueprints: named services that are either fixed (a set
//! number of instances per cluster, e.g. a batch head node) or scalable
//! (e.g. workers), with dependency edges that drive deployment order and
//! teardown.

mod document;
mod graph;
mod teardown;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use document::DefinitionDocument;
pub use graph::{dependency_closure_fixed, deployment_order, derive_dependencies, validate_definition};
pub use teardown::teardown_candidates;

use crate::ids::{ContextId, DefinitionId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceKind {
    Fixed,
    Scalable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OfferingKind {
    Compute,
    Disk,
    Network,
}

impl OfferingKind {
    pub const ALL: [OfferingKind; 3] = [OfferingKind::Compute, OfferingKind::Disk, OfferingKind::Network];
}

impl fmt::Display for OfferingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OfferingKind::Compute => "compute",
            OfferingKind::Disk => "disk",
            OfferingKind::Network => "network",
        })
    }
}

/// Global offering ids, one per kind; the hardware configuration of a
/// service's instances.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OfferingTriple {
    pub compute: String,
    pub disk: String,
    pub network: String,
}

impl OfferingTriple {
    pub fn new(compute: &str, disk: &str, network: &str) -> Self {
        Self {
            compute: compute.into(),
            disk: disk.into(),
            network: network.into(),
        }
    }
}

impl fmt::Display for OfferingTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.compute, self.disk, self.network)
    }
}

fn default_count() -> u32 {
    1
}

/// One service of a cluster definition. Field names follow the definition
/// document format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub kind: ServiceKind,
    /// `fixed_count` for fixed services, `min_instances` for scalable ones.
    #[serde(default = "default_count")]
    pub count: u32,
    #[serde(rename = "context")]
    pub context_id: ContextId,
    #[serde(rename = "image")]
    pub image_id: String,
    #[serde(default)]
    pub offerings: BTreeMap<OfferingKind, String>,
    #[serde(default)]
    pub depends_on: BTreeSet<String>,
}

impl ServiceSpec {
    pub fn fixed(name: &str, count: u32) -> Self {
        Self::new(name, ServiceKind::Fixed, count)
    }

    pub fn scalable(name: &str, min_instances: u32) -> Self {
        Self::new(name, ServiceKind::Scalable, min_instances)
    }

    fn new(name: &str, kind: ServiceKind, count: u32) -> Self {
        Self {
            name: name.into(),
            kind,
            count,
            context_id: ContextId::from(""),
            image_id: String::new(),
            offerings: BTreeMap::new(),
            depends_on: BTreeSet::new(),
        }
    }

    pub fn with_context(mut self, context: &ContextId) -> Self {
        self.context_id = context.clone();
        self
    }

    pub fn with_image(mut self, image: &str) -> Self {
        self.image_id = image.into();
        self
    }

    pub fn with_offerings(mut self, triple: &OfferingTriple) -> Self {
        self.offerings = BTreeMap::from([
            (OfferingKind::Compute, triple.compute.clone()),
            (OfferingKind::Disk, triple.disk.clone()),
            (OfferingKind::Network, triple.network.clone()),
        ]);
        self
    }

    pub fn depending_on(mut self, names: &[&str]) -> Self {
        self.depends_on.extend(names.iter().map(|n| n.to_string()));
        self
    }

    pub fn is_fixed(&self) -> bool {
        self.kind == ServiceKind::Fixed
    }

    pub fn fixed_count(&self) -> Option<u32> {
        self.is_fixed().then_some(self.count)
    }

    pub fn min_instances(&self) -> Option<u32> {
        (!self.is_fixed()).then_some(self.count)
    }

    /// The offering triple, when all three kinds are present.
    pub fn triple(&self) -> Option<OfferingTriple> {
        let get = |k| self.offerings.get(&k).filter(|v| !v.is_empty()).cloned();
        Some(OfferingTriple {
            compute: get(OfferingKind::Compute)?,
            disk: get(OfferingKind::Disk)?,
            network: get(OfferingKind::Network)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterDefinition {
    pub id: DefinitionId,
    pub name: String,
    pub owner: String,
    pub services: Vec<ServiceSpec>,
}

impl ClusterDefinition {
    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.services.iter().find(|s| s.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.services.iter().position(|s| s.name == name)
    }

    /// Services that list `name` among their direct dependencies.
    pub fn dependents_of<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ServiceSpec> + 'a {
        self.services.iter().filter(move |s| s.depends_on.contains(name))
    }
}

/// A single problem found by [`validate_definition`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Violation {
    Cycle { services: Vec<String> },
    UnknownDependency { service: String, dependency: String },
    /// A fixed service depending on a scalable one.
    InvalidEdge { service: String, dependency: String },
    BadCount { service: String },
    MissingOffering { service: String, kind: OfferingKind },
    DuplicateName { service: String },
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::Cycle { .. } => "CYCLE",
            Violation::UnknownDependency { .. } => "UNKNOWN_DEPENDENCY",
            Violation::InvalidEdge { .. } => "INVALID_EDGE",
            Violation::BadCount { .. } => "BAD_COUNT",
            Violation::MissingOffering { .. } => "MISSING_OFFERING",
            Violation::DuplicateName { .. } => "DUPLICATE_NAME",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle { services } => write!(f, "CYCLE through {}", services.join(", ")),
            Violation::UnknownDependency { service, dependency } => {
                write!(f, "UNKNOWN_DEPENDENCY {service} -> {dependency}")
            }
            Violation::InvalidEdge { service, dependency } => {
                write!(f, "INVALID_EDGE fixed {service} -> scalable {dependency}")
            }
            Violation::BadCount { service } => write!(f, "BAD_COUNT on {service}"),
            Violation::MissingOffering { service, kind } => {
                write!(f, "MISSING_OFFERING {kind} on {service}")
            }
            Violation::DuplicateName { service } => write!(f, "DUPLICATE_NAME {service}"),
        }
    }
}
