//! The cluster definition document: TOML on disk, JSON over REST, same
//! field names either way.
//!
//! ```toml
//! name = "batch"
//!
//! [[services]]
//! name = "head"
//! kind = "fixed"
//! count = 1
//! context = "<context id>"
//! image = "cernvm-3"
//! offerings = { compute = "m1.large", disk = "disk-20", network = "public" }
//!
//! [[services]]
//! name = "workers"
//! kind = "scalable"
//! count = 2
//! context = "<context id>"
//! image = "cernvm-3"
//! offerings = { compute = "m1.small", disk = "disk-20", network = "private" }
//! depends_on = []
//! ```

use serde::{Deserialize, Serialize};

use super::{derive_dependencies, ClusterDefinition, ServiceSpec};
use crate::error::{Error, Result};
use crate::ids::DefinitionId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionDocument {
    pub name: String,
    #[serde(default)]
    pub services: Vec<ServiceSpec>,
}

impl DefinitionDocument {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::BadRequest(format!("definition document: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    /// Accepts TOML or JSON.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::BadRequest(format!("definition document: {e}")))
        } else {
            Self::from_toml(text)
        }
    }

    /// Builds a definition with derived dependency edges. Validation is a
    /// separate step so invalid documents can still be stored and inspected.
    pub fn into_definition(self, id: DefinitionId, owner: &str) -> Result<ClusterDefinition> {
        if self.name.trim().is_empty() {
            return Err(Error::EmptyName);
        }
        Ok(ClusterDefinition {
            id,
            name: self.name,
            owner: owner.to_owned(),
            services: derive_dependencies(self.services)?,
        })
    }
}

impl From<&ClusterDefinition> for DefinitionDocument {
    fn from(def: &ClusterDefinition) -> Self {
        Self {
            name: def.name.clone(),
            services: def.services.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{validate_definition, OfferingKind, ServiceKind};

    const DOC: &str = r#"
name = "batch"

[[services]]
name = "head"
kind = "fixed"
context = "ctx1"
image = "cernvm-3"
offerings = { compute = "m1.large", disk = "disk-20", network = "public" }

[[services]]
name = "workers"
kind = "scalable"
count = 2
context = "ctx1"
image = "cernvm-3"
offerings = { compute = "m1.small", disk = "disk-20", network = "private" }
"#;

    #[test]
    fn parses_toml_and_derives_edges() {
        let def = DefinitionDocument::from_toml(DOC)
            .unwrap()
            .into_definition(DefinitionId::from("d1"), "alice")
            .unwrap();
        assert_eq!(def.services.len(), 2);
        assert_eq!(def.services[0].kind, ServiceKind::Fixed);
        assert_eq!(def.services[0].count, 1);
        assert_eq!(def.services[1].count, 2);
        assert_eq!(def.services[1].offerings[&OfferingKind::Compute], "m1.small");
        assert!(def.services[1].depends_on.contains("head"));
        assert_eq!(validate_definition(&def), Ok(()));
    }

    #[test]
    fn json_and_toml_agree() {
        let doc = DefinitionDocument::from_toml(DOC).unwrap();
        let json = serde_json::to_string(&doc).unwrap();
        assert_eq!(DefinitionDocument::parse(&json).unwrap(), doc);
        let toml_again = doc.to_toml().unwrap();
        assert_eq!(DefinitionDocument::parse(&toml_again).unwrap(), doc);
    }

    #[test]
    fn missing_offering_survives_parsing_for_validation() {
        let text = DOC.replace(r#", network = "private""#, "");
        let def = DefinitionDocument::from_toml(&text)
            .unwrap()
            .into_definition(DefinitionId::from("d1"), "alice")
            .unwrap();
        let v = validate_definition(&def).unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].code(), "MISSING_OFFERING");
    }

    #[test]
    fn unknown_kind_is_bad_request() {
        let text = DOC.replace(r#"kind = "fixed""#, r#"kind = "elastic""#);
        assert!(matches!(DefinitionDocument::from_toml(&text), Err(Error::BadRequest(_))));
    }
}
