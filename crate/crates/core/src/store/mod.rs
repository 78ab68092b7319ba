//! The shared state store. Gateway servers and gateway agents each hold a
//! [`Store`] over the same backend and coordinate only through it.

mod backend;
mod clusters;
mod queue;
mod records;

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

pub use backend::{Backend, FileBackend, MemoryBackend, Tables};
pub use records::*;

use crate::clock::{SharedClock, Timestamp};
use crate::cluster::ClusterDefinition;
use crate::context::{Context, MarketplaceEntry};
use crate::error::{Error, Result};
use crate::ids::{ContextId, CredentialId, DefinitionId};
use crate::pairing::{PairedMachine, PairingSession, PairingState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueConfig {
    /// Claims a request may receive before a failure becomes final.
    pub max_attempts: u32,
    /// Pause before a retryably failed request becomes claimable again.
    pub retry_delay: Duration,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            retry_delay: Duration::from_secs(1),
        }
    }
}

/// Result of presenting a pin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PinClaim {
    Claimed(PairingSession),
    NotFound,
    Expired,
    AlreadyClaimed,
}

#[derive(Clone)]
pub struct Store {
    backend: Arc<dyn Backend>,
    clock: SharedClock,
    queue: QueueConfig,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("queue", &self.queue).finish_non_exhaustive()
    }
}

impl Store {
    pub fn new(backend: Arc<dyn Backend>, clock: SharedClock) -> Self {
        Self {
            backend,
            clock,
            queue: QueueConfig::default(),
        }
    }

    pub fn memory(clock: SharedClock) -> Self {
        Self::new(Arc::new(MemoryBackend::new()), clock)
    }

    pub fn file(path: impl AsRef<Path>, clock: SharedClock) -> Result<Self> {
        Ok(Self::new(Arc::new(FileBackend::open(path)?), clock))
    }

    pub fn with_queue_config(mut self, queue: QueueConfig) -> Self {
        self.queue = queue;
        self
    }

    pub fn queue_config(&self) -> QueueConfig {
        self.queue
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub(crate) fn read<T>(&self, f: impl FnOnce(&Tables) -> Result<T>) -> Result<T> {
        let mut f = Some(f);
        let mut out = None;
        self.backend.read(&mut |t| {
            if let Some(f) = f.take() {
                out = Some(f(t));
            }
        })?;
        out.unwrap_or_else(|| Err(Error::Internal("store read closure not run".into())))
    }

    pub(crate) fn write<T>(&self, f: impl FnOnce(&mut Tables) -> Result<T>) -> Result<T> {
        let mut f = Some(f);
        let mut out = None;
        self.backend.write(&mut |t| {
            let f = f.take().ok_or_else(|| Error::Internal("store write retried".into()))?;
            out = Some(f(t)?);
            Ok(())
        })?;
        out.ok_or_else(|| Error::Internal("store write closure not run".into()))
    }

    // contexts

    pub fn insert_context(&self, ctx: Context) -> Result<()> {
        self.write(|t| {
            if t.contexts.contains_key(&ctx.id) {
                return Err(Error::Conflict(format!("context {} exists", ctx.id)));
            }
            t.contexts.insert(ctx.id.clone(), ctx);
            Ok(())
        })
    }

    pub fn get_context(&self, id: &ContextId) -> Result<Context> {
        self.read(|t| {
            t.contexts
                .get(id)
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("context {id}")))
        })
    }

    /// Owned contexts, oldest first.
    pub fn contexts_owned_by(&self, owner: &str) -> Result<Vec<Context>> {
        self.read(|t| {
            let mut v: Vec<Context> = t.contexts.values().filter(|c| c.owner == owner).cloned().collect();
            v.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
            Ok(v)
        })
    }

    pub fn insert_market_entry(&self, entry: MarketplaceEntry) -> Result<()> {
        self.write(|t| {
            if !t.contexts.contains_key(&entry.context_id) {
                return Err(Error::NotFound(format!("context {}", entry.context_id)));
            }
            if t.market.iter().any(|e| e.context_id == entry.context_id) {
                return Err(Error::AlreadyPublished);
            }
            t.market.push(entry);
            Ok(())
        })
    }

    pub fn market_entry(&self, id: &ContextId) -> Result<Option<MarketplaceEntry>> {
        self.read(|t| Ok(t.market.iter().find(|e| &e.context_id == id).cloned()))
    }

    /// Newest first; entries published at the same instant keep reverse
    /// insertion order.
    pub fn market_entries(&self) -> Result<Vec<MarketplaceEntry>> {
        self.read(|t| {
            let mut v: Vec<MarketplaceEntry> = t.market.iter().rev().cloned().collect();
            v.sort_by_key(|e| std::cmp::Reverse(e.published_at));
            Ok(v)
        })
    }

    // pairing

    /// Fails with `Conflict` when another unexpired open session uses the pin.
    pub fn insert_pairing(&self, session: PairingSession) -> Result<()> {
        let now = self.now();
        self.write(|t| {
            let entry = t.pairings.entry(session.pin.clone()).or_default();
            if entry
                .iter()
                .any(|s| s.state == PairingState::Open && !s.is_expired_at(now))
            {
                return Err(Error::Conflict(format!("pin {} in use", session.pin)));
            }
            entry.push(session);
            Ok(())
        })
    }

    pub fn claim_pairing(&self, pin: &str, report: PairedMachine) -> Result<PinClaim> {
        let now = self.now();
        self.write(|t| {
            let Some(session) = t.pairings.get_mut(pin).and_then(|v| v.last_mut()) else {
                return Ok(PinClaim::NotFound);
            };
            match session.state {
                PairingState::Claimed => Ok(PinClaim::AlreadyClaimed),
                PairingState::Expired => Ok(PinClaim::Expired),
                PairingState::Open if session.is_expired_at(now) => {
                    session.state = PairingState::Expired;
                    Ok(PinClaim::Expired)
                }
                PairingState::Open => {
                    session.state = PairingState::Claimed;
                    session.claimed_report = Some(report);
                    Ok(PinClaim::Claimed(session.clone()))
                }
            }
        })
    }

    pub fn pairings_owned_by(&self, owner: &str) -> Result<Vec<PairingSession>> {
        self.read(|t| {
            Ok(t.pairings
                .values()
                .flatten()
                .filter(|s| s.owner == owner)
                .cloned()
                .collect())
        })
    }

    pub fn sweep_pairings(&self) -> Result<usize> {
        let now = self.now();
        self.write(|t| {
            let mut n = 0;
            for s in t.pairings.values_mut().flatten() {
                if s.state == PairingState::Open && s.is_expired_at(now) {
                    s.state = PairingState::Expired;
                    n += 1;
                }
            }
            Ok(n)
        })
    }

    // definitions

    pub fn insert_definition(&self, def: ClusterDefinition) -> Result<()> {
        self.write(|t| {
            if t.definitions.contains_key(&def.id) {
                return Err(Error::Conflict(format!("definition {} exists", def.id)));
            }
            t.definitions.insert(def.id.clone(), def);
            Ok(())
        })
    }

    pub fn get_definition(&self, id: &DefinitionId) -> Result<ClusterDefinition> {
        self.read(|t| {
            t.definitions
                .get(id)
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("definition {id}")))
        })
    }

    pub fn definitions_owned_by(&self, owner: &str) -> Result<Vec<ClusterDefinition>> {
        self.read(|t| Ok(t.definitions.values().filter(|d| d.owner == owner).cloned().collect()))
    }

    // accounts

    pub fn insert_user(&self, user: UserAccount) -> Result<()> {
        self.write(|t| {
            if t.users.contains_key(&user.username) {
                return Err(Error::Conflict(format!("user {} exists", user.username)));
            }
            t.users.insert(user.username.clone(), user);
            Ok(())
        })
    }

    pub fn user(&self, username: &str) -> Result<Option<UserAccount>> {
        self.read(|t| Ok(t.users.get(username).cloned()))
    }

    pub fn insert_credential(&self, cred: ApiCredential) -> Result<()> {
        self.write(|t| {
            if !t.users.contains_key(&cred.owner) {
                return Err(Error::NotFound(format!("user {}", cred.owner)));
            }
            t.credentials.insert(cred.id.clone(), cred);
            Ok(())
        })
    }

    pub fn credential(&self, id: &CredentialId) -> Result<Option<ApiCredential>> {
        self.read(|t| Ok(t.credentials.get(id).cloned()))
    }

    pub fn revoke_credential(&self, id: &CredentialId, owner: &str) -> Result<()> {
        self.write(|t| match t.credentials.get_mut(id) {
            Some(c) if c.owner == owner => {
                c.revoked = true;
                Ok(())
            }
            _ => Err(Error::NotFound(format!("credential {id}"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::ids::UserId;

    #[test]
    fn failed_write_leaves_file_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        let clock = ManualClock::new(Timestamp(0));
        let store = Store::file(&path, clock.shared()).unwrap();
        store
            .insert_user(UserAccount {
                id: UserId::random(),
                username: "alice".into(),
                password_digest: "x".into(),
                groups: Default::default(),
            })
            .unwrap();
        let before = std::fs::read(&path).unwrap();
        let err = store
            .insert_credential(ApiCredential {
                id: CredentialId::random(),
                owner: "nobody".into(),
                secret_digest: "y".into(),
                created_at: Timestamp(0),
                revoked: false,
            })
            .unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
        assert_eq!(std::fs::read(&path).unwrap(), before);
    }

    #[test]
    fn corrupt_file_reports_storage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        std::fs::write(&path, b"{not json").unwrap();
        let err = Store::file(&path, ManualClock::default().shared()).unwrap_err();
        assert_eq!(err.code(), "STORAGE");
    }

    #[test]
    fn two_handles_on_one_file_see_each_other() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        let clock = ManualClock::new(Timestamp(0));
        let a = Store::file(&path, clock.shared()).unwrap();
        let b = Store::file(&path, clock.shared()).unwrap();
        a.insert_user(UserAccount {
            id: UserId::random(),
            username: "alice".into(),
            password_digest: "x".into(),
            groups: Default::default(),
        })
        .unwrap();
        assert!(b.user("alice").unwrap().is_some());
    }
}
