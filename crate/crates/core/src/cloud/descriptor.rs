use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::OfferingTriple;
use crate::principal::Principal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quotas {
    pub max_instances: u32,
    pub max_cpus: u32,
    pub max_memory_mb: u64,
}

impl Quotas {
    pub fn unlimited() -> Self {
        Self {
            max_instances: u32::MAX,
            max_cpus: u32::MAX,
            max_memory_mb: u64::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AclAction {
    Allow,
    Deny,
}

/// `pattern` is `user:<glob>`, `group:<glob>` or `*`. A bare glob matches
/// the user name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AclRule {
    pub action: AclAction,
    pub pattern: String,
}

impl AclRule {
    pub fn allow(pattern: &str) -> Self {
        Self {
            action: AclAction::Allow,
            pattern: pattern.into(),
        }
    }

    pub fn deny(pattern: &str) -> Self {
        Self {
            action: AclAction::Deny,
            pattern: pattern.into(),
        }
    }

    pub fn matches(&self, who: &Principal) -> bool {
        if self.pattern == "*" {
            return true;
        }
        if let Some(g) = self.pattern.strip_prefix("group:") {
            return who.groups.iter().any(|name| glob(g, name));
        }
        let u = self.pattern.strip_prefix("user:").unwrap_or(&self.pattern);
        glob(u, &who.user)
    }
}

/// First matching rule decides. An empty list admits everyone; a non-empty
/// list with no match denies.
pub fn acl_allows(acl: &[AclRule], who: &Principal) -> bool {
    if acl.is_empty() {
        return true;
    }
    acl.iter()
        .find(|r| r.matches(who))
        .is_some_and(|r| r.action == AclAction::Allow)
}

/// `*` matches any run of characters, `?` exactly one.
pub fn glob(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

/// Cloud-side offering ids a global triple maps to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LocalFlavor {
    pub compute: String,
    pub disk: String,
    pub network: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudDescriptor {
    pub cloud_id: String,
    pub quotas: Quotas,
    #[serde(default)]
    pub acl: Vec<AclRule>,
    /// Global image id to local template id.
    #[serde(default)]
    pub image_map: BTreeMap<String, String>,
    /// Global offering id to local flavor id.
    #[serde(default)]
    pub offering_map: BTreeMap<String, String>,
}

impl CloudDescriptor {
    pub fn new(cloud_id: &str, quotas: Quotas) -> Self {
        Self {
            cloud_id: cloud_id.into(),
            quotas,
            acl: Vec::new(),
            image_map: BTreeMap::new(),
            offering_map: BTreeMap::new(),
        }
    }

    pub fn map_image(mut self, global: &str, local: &str) -> Self {
        self.image_map.insert(global.into(), local.into());
        self
    }

    pub fn map_offering(mut self, global: &str, local: &str) -> Self {
        self.offering_map.insert(global.into(), local.into());
        self
    }

    pub fn with_acl(mut self, acl: Vec<AclRule>) -> Self {
        self.acl = acl;
        self
    }

    pub fn local_template(&self, image_id: &str) -> Option<&str> {
        self.image_map.get(image_id).map(String::as_str)
    }

    pub fn local_flavor(&self, offerings: &OfferingTriple) -> Option<LocalFlavor> {
        let get = |id: &str| self.offering_map.get(id).cloned();
        Some(LocalFlavor {
            compute: get(&offerings.compute)?,
            disk: get(&offerings.disk)?,
            network: get(&offerings.network)?,
        })
    }
}
