use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use super::{Link, Message, Session, SessionCore, BROKER_NAME};
use crate::clock::{system_clock, SharedClock};
use crate::error::{Error, Result};

/// In-process bus. Cheap to clone; clones share the same namespace.
#[derive(Clone)]
pub struct MemoryHub {
    inner: Arc<HubInner>,
}

struct HubInner {
    clock: SharedClock,
    sessions: RwLock<HashMap<String, Arc<SessionCore>>>,
    channels: RwLock<HashMap<String, BTreeSet<String>>>,
    tap: Mutex<Option<Vec<Message>>>,
}

impl std::fmt::Debug for MemoryHub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<String> = self.inner.sessions.read().keys().cloned().collect();
        f.debug_struct("MemoryHub").field("sessions", &names).finish()
    }
}

impl Default for MemoryHub {
    fn default() -> Self {
        Self::new(system_clock())
    }
}

impl MemoryHub {
    pub fn new(clock: SharedClock) -> Self {
        Self {
            inner: Arc::new(HubInner {
                clock,
                sessions: RwLock::new(HashMap::new()),
                channels: RwLock::new(HashMap::new()),
                tap: Mutex::new(None),
            }),
        }
    }

    pub fn connect(&self, name: &str) -> Result<Session> {
        if name.is_empty() || name == BROKER_NAME {
            return Err(Error::InvalidValue(format!("bus name `{name}`")));
        }
        let core = SessionCore::new(name);
        {
            let mut sessions = self.inner.sessions.write();
            if sessions.contains_key(name) {
                return Err(Error::NameTaken(name.to_owned()));
            }
            sessions.insert(name.to_owned(), core.clone());
        }
        let link = Arc::new(MemoryLink {
            hub: self.inner.clone(),
            name: name.to_owned(),
            closed: AtomicBool::new(false),
        });
        Ok(Session::new(core, link))
    }

    pub fn is_connected(&self, name: &str) -> bool {
        self.inner.sessions.read().contains_key(name)
    }

    /// Starts recording every message that crosses the hub.
    pub fn start_tap(&self) {
        *self.inner.tap.lock() = Some(Vec::new());
    }

    /// Returns and clears the recording.
    pub fn take_tap(&self) -> Vec<Message> {
        self.inner.tap.lock().as_mut().map(std::mem::take).unwrap_or_default()
    }
}

struct MemoryLink {
    hub: Arc<HubInner>,
    name: String,
    closed: AtomicBool,
}

impl MemoryLink {
    fn stamp(&self, mut msg: Message) -> Message {
        msg.sent_at = self.hub.clock.now();
        if let Some(tap) = self.hub.tap.lock().as_mut() {
            tap.push(msg.clone());
        }
        msg
    }
}

impl Link for MemoryLink {
    fn send(&self, msg: Message) -> Result<()> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(Error::Unreachable(msg.recipient));
        }
        let target = self.hub.sessions.read().get(&msg.recipient).cloned();
        let Some(target) = target else {
            return Err(Error::Unreachable(msg.recipient));
        };
        target.deliver(self.stamp(msg));
        Ok(())
    }

    fn publish(&self, msg: Message) -> Result<usize> {
        let names: Vec<String> = self
            .hub
            .channels
            .read()
            .get(&msg.recipient)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default();
        let targets: Vec<Arc<SessionCore>> = {
            let sessions = self.hub.sessions.read();
            names.iter().filter_map(|n| sessions.get(n).cloned()).collect()
        };
        let msg = self.stamp(msg);
        for t in &targets {
            t.deliver(msg.clone());
        }
        Ok(targets.len())
    }

    fn subscribe(&self, channel: &str) -> Result<()> {
        self.hub
            .channels
            .write()
            .entry(channel.to_owned())
            .or_default()
            .insert(self.name.clone());
        Ok(())
    }

    fn unsubscribe(&self, channel: &str) -> Result<()> {
        if let Some(set) = self.hub.channels.write().get_mut(channel) {
            set.remove(&self.name);
        }
        Ok(())
    }

    fn close(&self) {
        if self.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        self.hub.sessions.write().remove(&self.name);
        for set in self.hub.channels.write().values_mut() {
            set.remove(&self.name);
        }
    }
}
