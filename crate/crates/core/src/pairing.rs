//! Single-use PIN pairing: a user opens a session bound to a context, types
//! the PIN on a VM console, and the VM claims the rendered context while
//! reporting its identity.

use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::context::ContextService;
use crate::error::{Error, Result};
use crate::ids::ContextId;
use crate::store::{PinClaim, Store};

/// Uppercase letters and digits without the look-alikes 0/O and 1/I.
pub const PIN_ALPHABET: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZ23456789";
pub const PIN_LEN: usize = 6;
pub const DEFAULT_TTL: Duration = Duration::from_secs(24 * 60 * 60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PairingState {
    Open,
    Claimed,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedMachine {
    pub vm_name: String,
    pub cernvm_version: String,
    pub ip_address: String,
    #[serde(default)]
    pub paired_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingSession {
    pub pin: String,
    pub context_id: ContextId,
    pub owner: String,
    pub state: PairingState,
    pub created_at: Timestamp,
    pub ttl_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claimed_report: Option<PairedMachine>,
}

impl PairingSession {
    pub fn expires_at(&self) -> Timestamp {
        self.created_at + Duration::from_millis(self.ttl_ms)
    }

    pub fn is_expired_at(&self, now: Timestamp) -> bool {
        now >= self.expires_at()
    }
}

pub fn random_pin() -> String {
    let mut rng = rand::rng();
    (0..PIN_LEN)
        .map(|_| PIN_ALPHABET[rng.random_range(0..PIN_ALPHABET.len())] as char)
        .collect()
}

pub fn is_well_formed_pin(pin: &str) -> bool {
    pin.len() == PIN_LEN && pin.bytes().all(|b| PIN_ALPHABET.contains(&b))
}

#[derive(Clone)]
pub struct PairingService {
    store: Store,
    contexts: ContextService,
    ttl: Duration,
}

impl PairingService {
    pub fn new(store: Store, contexts: ContextService) -> Self {
        Self {
            store,
            contexts,
            ttl: DEFAULT_TTL,
        }
    }

    pub fn with_ttl(mut self, ttl: Duration) -> Self {
        self.ttl = ttl;
        self
    }

    pub fn open(&self, context_id: &ContextId, owner: &str) -> Result<PairingSession> {
        let ctx = self.contexts.get(context_id)?;
        if ctx.encrypted() {
            return Err(Error::EncryptedNotPairable);
        }
        // A collision with another open pin is astronomically rare; retry a
        // bounded number of times rather than loop forever.
        for _ in 0..16 {
            let session = PairingSession {
                pin: random_pin(),
                context_id: context_id.clone(),
                owner: owner.to_owned(),
                state: PairingState::Open,
                created_at: self.store.now(),
                ttl_ms: self.ttl.as_millis() as u64,
                claimed_report: None,
            };
            match self.store.insert_pairing(session.clone()) {
                Ok(()) => return Ok(session),
                Err(Error::Conflict(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(Error::Internal("could not allocate a unique pin".into()))
    }

    /// Consumes the pin and returns the rendered context. Exactly one caller
    /// ever succeeds for a given session.
    pub fn claim(&self, pin: &str, mut report: PairedMachine) -> Result<String> {
        for (field, value) in [
            ("vm_name", &report.vm_name),
            ("cernvm_version", &report.cernvm_version),
            ("ip_address", &report.ip_address),
        ] {
            if value.trim().is_empty() {
                return Err(Error::InvalidValue(format!("{field} must not be empty")));
            }
        }
        report.paired_at = self.store.now();
        let session = match self.store.claim_pairing(pin, report)? {
            PinClaim::Claimed(session) => session,
            PinClaim::NotFound => return Err(Error::PinNotFound),
            PinClaim::Expired => return Err(Error::PinExpired),
            PinClaim::AlreadyClaimed => return Err(Error::PinAlreadyClaimed),
        };
        self.contexts.render(&session.context_id, None)
    }

    /// Machines paired through `owner`'s sessions, newest first.
    pub fn list_paired_machines(&self, owner: &str) -> Result<Vec<PairedMachine>> {
        let mut machines: Vec<PairedMachine> = self
            .store
            .pairings_owned_by(owner)?
            .into_iter()
            .filter_map(|s| s.claimed_report)
            .collect();
        machines.sort_by_key(|m| std::cmp::Reverse(m.paired_at));
        Ok(machines)
    }

    /// Marks every open session past its ttl as expired.
    pub fn sweep(&self) -> Result<usize> {
        self.store.sweep_pairings()
    }
}
