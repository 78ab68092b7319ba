//! Named-session message bus with directed request/reply and
//! publish/subscribe. Two transports share the session logic: an in-process
//! hub and a TCP broker.
//!
//! Messages between one pair of sessions are handled in the order they were
//! sent: each session runs one handler thread per peer.

mod memory;
mod tcp;
mod wire;

use std::collections::HashMap;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::Timestamp;
use crate::error::{Error, Result};
use crate::ids::random_hex128;

pub use memory::MemoryHub;
pub use tcp::{connect_tcp, TcpBroker};
pub use wire::{read_frame, write_frame, MAX_FRAME};

/// Name reserved for the TCP broker itself.
pub const BROKER_NAME: &str = "$bus";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Request,
    Reply,
    Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    /// Empty on fire-and-forget publishes.
    pub correlation_id: String,
    pub sender: String,
    /// A session name, or the channel for publishes.
    pub recipient: String,
    pub kind: MessageKind,
    pub body: Value,
    #[serde(skip)]
    pub sent_at: Timestamp,
}

pub type RequestHandler = Arc<dyn Fn(&Message) -> Value + Send + Sync>;
/// Returning `Some` answers a [`Session::gather`].
pub type SubscriptionHandler = Arc<dyn Fn(&Message) -> Option<Value> + Send + Sync>;

/// The transport half of a session.
pub trait Link: Send + Sync {
    /// Directed delivery. May fail fast with `Unreachable`, or report it
    /// later through [`SessionCore::undeliverable`].
    fn send(&self, msg: Message) -> Result<()>;
    /// Returns how many sessions received the message.
    fn publish(&self, msg: Message) -> Result<usize>;
    fn subscribe(&self, channel: &str) -> Result<()>;
    fn unsubscribe(&self, channel: &str) -> Result<()>;
    fn close(&self);
}

/// Per-session dispatch shared by every transport.
pub struct SessionCore {
    name: String,
    link: OnceLock<Arc<dyn Link>>,
    pending: Mutex<HashMap<String, Sender<Result<Message>>>>,
    handler: Mutex<Option<RequestHandler>>,
    peers: Mutex<HashMap<String, Sender<Message>>>,
    subscriptions: Mutex<HashMap<String, Sender<Message>>>,
}

impl SessionCore {
    pub(crate) fn new(name: &str) -> Arc<Self> {
        Arc::new(Self {
            name: name.to_owned(),
            link: OnceLock::new(),
            pending: Mutex::new(HashMap::new()),
            handler: Mutex::new(None),
            peers: Mutex::new(HashMap::new()),
            subscriptions: Mutex::new(HashMap::new()),
        })
    }

    pub(crate) fn attach(&self, link: Arc<dyn Link>) {
        let _ = self.link.set(link);
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Entry point for every inbound message.
    pub(crate) fn deliver(self: &Arc<Self>, msg: Message) {
        match msg.kind {
            MessageKind::Reply => {
                if let Some(tx) = self.pending.lock().get(&msg.correlation_id) {
                    let _ = tx.send(Ok(msg));
                }
            }
            MessageKind::Request => self.dispatch_request(msg),
            MessageKind::Event => {
                let tx = self.subscriptions.lock().get(&msg.recipient).cloned();
                if let Some(tx) = tx {
                    let _ = tx.send(msg);
                }
            }
        }
    }

    /// A directed message with this correlation id could not be delivered.
    pub(crate) fn undeliverable(&self, correlation_id: &str, recipient: &str) {
        if let Some(tx) = self.pending.lock().get(correlation_id) {
            let _ = tx.send(Err(Error::Unreachable(recipient.to_owned())));
        }
    }

    /// The transport is gone; every waiter sees `Unreachable`.
    pub(crate) fn disconnected(&self) {
        self.pending.lock().clear();
    }

    fn dispatch_request(self: &Arc<Self>, msg: Message) {
        let mut peers = self.peers.lock();
        let tx = peers.entry(msg.sender.clone()).or_insert_with(|| {
            let (tx, rx) = mpsc::channel::<Message>();
            let core = Arc::downgrade(self);
            thread::Builder::new()
                .name(format!("bus-{}-peer", self.name))
                .spawn(move || {
                    while let Ok(msg) = rx.recv() {
                        let Some(core) = core.upgrade() else { break };
                        core.handle_request(msg);
                    }
                })
                .expect("spawn bus peer thread");
            tx
        });
        let _ = tx.send(msg);
    }

    fn handle_request(&self, msg: Message) {
        let handler = self.handler.lock().clone();
        let Some(handler) = handler else {
            tracing::warn!(session = %self.name, from = %msg.sender, "request dropped: no handler");
            return;
        };
        let body = handler(&msg);
        self.reply_to(&msg, body);
    }

    fn reply_to(&self, msg: &Message, body: Value) {
        let Some(link) = self.link.get() else { return };
        let reply = Message {
            correlation_id: msg.correlation_id.clone(),
            sender: self.name.clone(),
            recipient: msg.sender.clone(),
            kind: MessageKind::Reply,
            body,
            sent_at: Timestamp::default(),
        };
        if let Err(e) = link.send(reply) {
            tracing::debug!(session = %self.name, error = %e, "reply not delivered");
        }
    }
}

/// A connected, named participant.
pub struct Session {
    core: Arc<SessionCore>,
    link: Arc<dyn Link>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("name", &self.core.name).finish()
    }
}

impl Session {
    pub(crate) fn new(core: Arc<SessionCore>, link: Arc<dyn Link>) -> Self {
        core.attach(link.clone());
        Self { core, link }
    }

    pub fn name(&self) -> &str {
        &self.core.name
    }

    fn register(&self) -> (String, Receiver<Result<Message>>) {
        let id = random_hex128();
        let (tx, rx) = mpsc::channel();
        self.core.pending.lock().insert(id.clone(), tx);
        (id, rx)
    }

    fn unregister(&self, id: &str) {
        self.core.pending.lock().remove(id);
    }

    /// Sends a request and waits for its reply body.
    pub fn request(&self, recipient: &str, body: Value, timeout: Duration) -> Result<Value> {
        let (id, rx) = self.register();
        let msg = Message {
            correlation_id: id.clone(),
            sender: self.core.name.clone(),
            recipient: recipient.to_owned(),
            kind: MessageKind::Request,
            body,
            sent_at: Timestamp::default(),
        };
        let outcome = self.link.send(msg).and_then(|()| match rx.recv_timeout(timeout) {
            Ok(reply) => reply.map(|m| m.body),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout(format!("no reply from {recipient}"))),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Unreachable(recipient.to_owned())),
        });
        self.unregister(&id);
        outcome
    }

    /// Fire-and-forget publish; returns the number of receivers.
    pub fn publish(&self, channel: &str, body: Value) -> Result<usize> {
        self.link.publish(Message {
            correlation_id: String::new(),
            sender: self.core.name.clone(),
            recipient: channel.to_owned(),
            kind: MessageKind::Event,
            body,
            sent_at: Timestamp::default(),
        })
    }

    /// Publishes and collects replies until every receiver answered or the
    /// timeout passes.
    pub fn gather(&self, channel: &str, body: Value, timeout: Duration) -> Result<Vec<Message>> {
        let (id, rx) = self.register();
        let deadline = Instant::now() + timeout;
        let delivered = self.link.publish(Message {
            correlation_id: id.clone(),
            sender: self.core.name.clone(),
            recipient: channel.to_owned(),
            kind: MessageKind::Event,
            body,
            sent_at: Timestamp::default(),
        });
        let outcome = delivered.map(|n| {
            let mut replies = Vec::with_capacity(n);
            while replies.len() < n {
                let left = deadline.saturating_duration_since(Instant::now());
                match rx.recv_timeout(left) {
                    Ok(Ok(m)) => replies.push(m),
                    Ok(Err(_)) => {}
                    Err(_) => break,
                }
            }
            replies
        });
        self.unregister(&id);
        outcome
    }

    /// Installs the handler that answers directed requests.
    pub fn serve(&self, handler: impl Fn(&Message) -> Value + Send + Sync + 'static) {
        *self.core.handler.lock() = Some(Arc::new(handler));
    }

    pub fn subscribe(
        &self,
        channel: &str,
        handler: impl Fn(&Message) -> Option<Value> + Send + Sync + 'static,
    ) -> Result<()> {
        let handler: SubscriptionHandler = Arc::new(handler);
        let (tx, rx) = mpsc::channel::<Message>();
        let core = Arc::downgrade(&self.core);
        thread::Builder::new()
            .name(format!("bus-{}-sub", self.core.name))
            .spawn(move || {
                while let Ok(msg) = rx.recv() {
                    let answer = handler(&msg);
                    let Some(core) = core.upgrade() else { break };
                    if let (Some(body), false) = (answer, msg.correlation_id.is_empty()) {
                        core.reply_to(&msg, body);
                    }
                }
            })
            .map_err(|e| Error::Internal(e.to_string()))?;
        self.core.subscriptions.lock().insert(channel.to_owned(), tx);
        if let Err(e) = self.link.subscribe(channel) {
            self.core.subscriptions.lock().remove(channel);
            return Err(e);
        }
        Ok(())
    }

    pub fn unsubscribe(&self, channel: &str) -> Result<()> {
        self.core.subscriptions.lock().remove(channel);
        self.link.unsubscribe(channel)
    }

    pub fn close(&self) {
        self.link.close();
        self.core.peers.lock().clear();
        self.core.subscriptions.lock().clear();
        self.core.pending.lock().clear();
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.close();
    }
}
