//! Contextualization records: plugin sections rendered as amiconfig
//! user-data, versioned by cloning, optionally sealed under a passphrase,
//! and shareable through the marketplace.
//!
//! A stored [`Context`] never changes. "Editing" means cloning into a new id
//! whose `parent_id` points back at the source.

mod crypto;
mod render;

use std::collections::{BTreeMap, BTreeSet};

use base64::Engine;
use serde::{Deserialize, Serialize};

pub use crypto::{decrypt_body, encrypt_body, KdfParams};
pub use render::{checksum, render, HEADER_SECTION};

use crate::clock::Timestamp;
use crate::error::{Error, Result};
use crate::ids::ContextId;
use crate::store::Store;

pub type Section = BTreeMap<String, String>;
/// plugin name -> key -> value
pub type Sections = BTreeMap<String, Section>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "ContextRecord", try_from = "ContextRecord")]
pub struct Context {
    pub id: ContextId,
    pub name: String,
    pub owner: String,
    pub enabled_plugins: Vec<String>,
    pub parent_id: Option<ContextId>,
    pub created_at: Timestamp,
    pub body: ContextBody,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContextBody {
    Plain { sections: Sections, checksum: String },
    Sealed { cipher_blob: Vec<u8> },
}

impl Context {
    pub fn encrypted(&self) -> bool {
        matches!(self.body, ContextBody::Sealed { .. })
    }

    pub fn sections(&self) -> Option<&Sections> {
        match &self.body {
            ContextBody::Plain { sections, .. } => Some(sections),
            ContextBody::Sealed { .. } => None,
        }
    }

    pub fn checksum(&self) -> Option<&str> {
        match &self.body {
            ContextBody::Plain { checksum, .. } => Some(checksum),
            ContextBody::Sealed { .. } => None,
        }
    }

    pub fn cipher_blob(&self) -> Option<&[u8]> {
        match &self.body {
            ContextBody::Sealed { cipher_blob } => Some(cipher_blob),
            ContextBody::Plain { .. } => None,
        }
    }

    /// Sections in the clear, decrypting when needed.
    pub fn open(&self, passphrase: Option<&str>) -> Result<Sections> {
        match &self.body {
            ContextBody::Plain { sections, .. } => Ok(sections.clone()),
            ContextBody::Sealed { cipher_blob } => {
                let passphrase = passphrase.ok_or(Error::BadPassphrase)?;
                decrypt_body(cipher_blob, passphrase)
            }
        }
    }
}

/// Flat storage and wire shape of a [`Context`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContextRecord {
    id: ContextId,
    name: String,
    owner: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sections: Option<Sections>,
    enabled_plugins: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent_id: Option<ContextId>,
    encrypted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cipher_blob: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    checksum: Option<String>,
    created_at: Timestamp,
}

impl From<Context> for ContextRecord {
    fn from(ctx: Context) -> Self {
        let (sections, cipher_blob, checksum) = match ctx.body {
            ContextBody::Plain { sections, checksum } => (Some(sections), None, Some(checksum)),
            ContextBody::Sealed { cipher_blob } => (
                None,
                Some(base64::engine::general_purpose::STANDARD.encode(cipher_blob)),
                None,
            ),
        };
        ContextRecord {
            encrypted: cipher_blob.is_some(),
            id: ctx.id,
            name: ctx.name,
            owner: ctx.owner,
            sections,
            enabled_plugins: ctx.enabled_plugins,
            parent_id: ctx.parent_id,
            cipher_blob,
            checksum,
            created_at: ctx.created_at,
        }
    }
}

impl TryFrom<ContextRecord> for Context {
    type Error = String;

    fn try_from(rec: ContextRecord) -> std::result::Result<Self, String> {
        let body = match (rec.encrypted, rec.sections, rec.cipher_blob, rec.checksum) {
            (false, Some(sections), None, Some(checksum)) => ContextBody::Plain { sections, checksum },
            (true, None, Some(blob), None) => ContextBody::Sealed {
                cipher_blob: base64::engine::general_purpose::STANDARD
                    .decode(blob)
                    .map_err(|e| e.to_string())?,
            },
            _ => return Err("context record mixes plaintext and encrypted fields".into()),
        };
        Ok(Context {
            id: rec.id,
            name: rec.name,
            owner: rec.owner,
            enabled_plugins: rec.enabled_plugins,
            parent_id: rec.parent_id,
            created_at: rec.created_at,
            body,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarketplaceEntry {
    pub context_id: ContextId,
    pub category: String,
    pub tags: BTreeSet<String>,
    pub published_at: Timestamp,
    pub publisher: String,
}

#[derive(Debug, Clone, Default)]
pub struct NewContext {
    pub name: String,
    pub owner: String,
    pub sections: Sections,
    pub enabled_plugins: Vec<String>,
    pub passphrase: Option<String>,
}

fn check_plugin_name(name: &str) -> Result<()> {
    let bad = name.is_empty()
        || name == "amiconfig"
        || name
            .chars()
            .any(|c| c.is_whitespace() || c.is_control() || c == '[' || c == ']');
    if bad {
        return Err(Error::InvalidValue(format!("invalid plugin name {name:?}")));
    }
    Ok(())
}

fn check_key(plugin: &str, key: &str) -> Result<()> {
    let bad = key.is_empty()
        || key.trim() != key
        || key.starts_with(['[', ';', '#'])
        || key.chars().any(|c| c == '=' || c.is_control());
    if bad {
        return Err(Error::InvalidValue(format!("invalid key {key:?} in [{plugin}]")));
    }
    Ok(())
}

fn check_value(plugin: &str, key: &str, value: &str) -> Result<()> {
    if value.contains(['\n', '\r']) {
        return Err(Error::InvalidValue(format!(
            "value of {plugin}.{key} contains a line break"
        )));
    }
    Ok(())
}

/// Checks a body against the creation rules and returns the enabled plugin
/// list deduplicated, first occurrence kept.
pub fn validate_body(name: &str, sections: &Sections, enabled_plugins: &[String]) -> Result<Vec<String>> {
    if name.trim().is_empty() {
        return Err(Error::EmptyName);
    }
    let mut seen = BTreeSet::new();
    let mut plugins = Vec::new();
    for plugin in enabled_plugins {
        if !sections.contains_key(plugin) {
            return Err(Error::UnknownPluginSection(plugin.clone()));
        }
        if seen.insert(plugin.as_str()) {
            plugins.push(plugin.clone());
        }
    }
    for (plugin, section) in sections {
        check_plugin_name(plugin)?;
        for (key, value) in section {
            check_key(plugin, key)?;
            check_value(plugin, key, value)?;
        }
    }
    Ok(plugins)
}

/// Context operations on top of the shared store.
#[derive(Clone)]
pub struct ContextService {
    store: Store,
    kdf: KdfParams,
}

impl ContextService {
    pub fn new(store: Store) -> Self {
        Self {
            store,
            kdf: KdfParams::default(),
        }
    }

    pub fn with_kdf(mut self, kdf: KdfParams) -> Self {
        self.kdf = kdf;
        self
    }

    pub fn create(&self, new: NewContext) -> Result<Context> {
        let plugins = validate_body(&new.name, &new.sections, &new.enabled_plugins)?;
        self.store_new(new.name, new.owner, new.sections, plugins, None, new.passphrase.as_deref())
    }

    fn store_new(
        &self,
        name: String,
        owner: String,
        sections: Sections,
        enabled_plugins: Vec<String>,
        parent_id: Option<ContextId>,
        passphrase: Option<&str>,
    ) -> Result<Context> {
        let body = match passphrase {
            Some(pass) => ContextBody::Sealed {
                cipher_blob: encrypt_body(&sections, pass, self.kdf)?,
            },
            None => {
                let checksum = checksum(&render(&enabled_plugins, &sections));
                ContextBody::Plain { sections, checksum }
            }
        };
        let ctx = Context {
            id: ContextId::random(),
            name,
            owner,
            enabled_plugins,
            parent_id,
            created_at: self.store.now(),
            body,
        };
        self.store.insert_context(ctx.clone())?;
        Ok(ctx)
    }

    pub fn get(&self, id: &ContextId) -> Result<Context> {
        self.store.get_context(id)
    }

    /// New context with identical body; an encrypted source stays encrypted
    /// under the same passphrase (with fresh salt and nonce).
    pub fn clone_context(
        &self,
        id: &ContextId,
        new_owner: &str,
        passphrase: Option<&str>,
    ) -> Result<Context> {
        let source = self.store.get_context(id)?;
        let sections = source.open(passphrase)?;
        let reseal = if source.encrypted() { passphrase } else { None };
        self.store_new(
            source.name.clone(),
            new_owner.to_owned(),
            sections,
            source.enabled_plugins.clone(),
            Some(source.id.clone()),
            reseal,
        )
    }

    pub fn render(&self, id: &ContextId, passphrase: Option<&str>) -> Result<String> {
        let ctx = self.store.get_context(id)?;
        let sections = ctx.open(passphrase)?;
        Ok(render(&ctx.enabled_plugins, &sections))
    }

    /// The chain of ancestors ending at `id`, root first.
    pub fn lineage(&self, id: &ContextId) -> Result<Vec<Context>> {
        let mut chain = vec![self.store.get_context(id)?];
        while let Some(parent) = chain.last().and_then(|c| c.parent_id.clone()) {
            if chain.iter().any(|c| c.id == parent) {
                return Err(Error::Internal(format!("lineage loop at {parent}")));
            }
            chain.push(self.store.get_context(&parent)?);
        }
        chain.reverse();
        Ok(chain)
    }

    pub fn publish(
        &self,
        id: &ContextId,
        publisher: &str,
        category: &str,
        tags: impl IntoIterator<Item = String>,
    ) -> Result<MarketplaceEntry> {
        let ctx = self.store.get_context(id)?;
        if ctx.encrypted() {
            return Err(Error::EncryptedNotPublishable);
        }
        let category = category.trim();
        if category.is_empty() {
            return Err(Error::InvalidValue("category must not be empty".into()));
        }
        let tags: BTreeSet<String> = tags
            .into_iter()
            .map(|t| t.trim().to_owned())
            .filter(|t| !t.is_empty())
            .collect();
        if tags.is_empty() {
            return Err(Error::InvalidValue("at least one tag is required".into()));
        }
        let entry = MarketplaceEntry {
            context_id: ctx.id,
            category: category.to_owned(),
            tags,
            published_at: self.store.now(),
            publisher: publisher.to_owned(),
        };
        self.store.insert_market_entry(entry.clone())?;
        Ok(entry)
    }

    pub fn is_published(&self, id: &ContextId) -> Result<bool> {
        self.store.market_entry(id).map(|e| e.is_some())
    }

    /// Entries in `category` (if given) carrying every tag in `tags`, newest
    /// first.
    pub fn search(&self, category: Option<&str>, tags: &[String]) -> Result<Vec<MarketplaceEntry>> {
        let entries = self.store.market_entries()?;
        Ok(entries
            .into_iter()
            .filter(|e| category.is_none_or(|c| e.category == c))
            .filter(|e| tags.iter().all(|t| e.tags.contains(t)))
            .collect())
    }
}
