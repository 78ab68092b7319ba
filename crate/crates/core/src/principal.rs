use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// An authenticated user as seen by the rest of the system.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Principal {
    pub user: String,
    #[serde(default)]
    pub groups: BTreeSet<String>,
}

impl Principal {
    pub fn new(user: &str) -> Self {
        Self {
            user: user.into(),
            groups: BTreeSet::new(),
        }
    }

    pub fn with_groups<I, S>(mut self, groups: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.groups.extend(groups.into_iter().map(Into::into));
        self
    }
}
