//! TCP transport. A broker process holds the name registry and channel
//! subscriptions; sessions talk to it over one framed connection each.
//!
//! Control traffic uses ordinary frames: a REQUEST addressed to `$bus` with
//! a body `{"op": ...}`, answered by a REPLY from `$bus`. A directed REQUEST
//! to a name nobody holds is answered by a REPLY from `$bus` with
//! `{"op": "unreachable"}` under the request's correlation id.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parking_lot::Mutex;
use serde_json::{json, Value};

use super::wire::{read_frame, write_frame};
use super::{Link, Message, MessageKind, Session, SessionCore, BROKER_NAME};
use crate::clock::Timestamp;
use crate::error::{Error, ErrorBody, Result};
use crate::ids::random_hex128;

const CONTROL_TIMEOUT: Duration = Duration::from_secs(5);

fn control_reply(to: &str, correlation_id: &str, body: Value) -> Message {
    Message {
        correlation_id: correlation_id.to_owned(),
        sender: BROKER_NAME.to_owned(),
        recipient: to.to_owned(),
        kind: MessageKind::Reply,
        body,
        sent_at: Timestamp::default(),
    }
}

fn error_value(err: &Error) -> Value {
    json!({ "error": err.to_body() })
}

struct Client {
    conn: u64,
    stream: TcpStream,
    writer: Arc<Mutex<BufWriter<TcpStream>>>,
}

#[derive(Default)]
struct BrokerState {
    clients: Mutex<HashMap<String, Client>>,
    channels: Mutex<HashMap<String, BTreeSet<String>>>,
    shutdown: AtomicBool,
    next_conn: AtomicU64,
}

impl BrokerState {
    fn writer_for(&self, name: &str) -> Option<Arc<Mutex<BufWriter<TcpStream>>>> {
        self.clients.lock().get(name).map(|c| c.writer.clone())
    }

    fn deliver(&self, name: &str, msg: &Message) -> bool {
        match self.writer_for(name) {
            Some(w) => write_frame(&mut *w.lock(), msg).is_ok(),
            None => false,
        }
    }

    fn forget(&self, name: &str, conn: u64) {
        let mut clients = self.clients.lock();
        if clients.get(name).is_some_and(|c| c.conn == conn) {
            clients.remove(name);
            drop(clients);
            for set in self.channels.lock().values_mut() {
                set.remove(name);
            }
        }
    }
}

/// The broker side of the TCP bus.
pub struct TcpBroker {
    addr: SocketAddr,
    state: Arc<BrokerState>,
}

impl std::fmt::Debug for TcpBroker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TcpBroker").field("addr", &self.addr).finish()
    }
}

impl TcpBroker {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::Internal(format!("bus bind: {e}")))?;
        let addr = listener.local_addr().map_err(|e| Error::Internal(e.to_string()))?;
        let state = Arc::new(BrokerState::default());
        let accept_state = state.clone();
        thread::Builder::new()
            .name("bus-broker-accept".into())
            .spawn(move || {
                for stream in listener.incoming() {
                    if accept_state.shutdown.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let state = accept_state.clone();
                    let _ = thread::Builder::new()
                        .name("bus-broker-conn".into())
                        .spawn(move || serve_connection(state, stream));
                }
            })
            .map_err(|e| Error::Internal(e.to_string()))?;
        Ok(Self { addr, state })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn connected(&self) -> Vec<String> {
        let mut v: Vec<String> = self.state.clients.lock().keys().cloned().collect();
        v.sort();
        v
    }

    pub fn shutdown(&self) {
        if self.state.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        for c in self.state.clients.lock().values() {
            let _ = c.stream.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for TcpBroker {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(state: Arc<BrokerState>, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else { return };
    let Ok(write_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(read_half);
    let writer = Arc::new(Mutex::new(BufWriter::new(write_half)));

    let Ok(Some(hello)) = read_frame(&mut reader) else { return };
    let name = hello.body.get("name").and_then(Value::as_str).unwrap_or_default().to_owned();
    let is_hello = hello.kind == MessageKind::Request
        && hello.recipient == BROKER_NAME
        && hello.body.get("op").and_then(Value::as_str) == Some("hello");
    let conn = state.next_conn.fetch_add(1, Ordering::SeqCst);
    let verdict = if !is_hello || name.is_empty() || name == BROKER_NAME {
        Err(Error::ProtocolError("expected hello with a name".into()))
    } else {
        let mut clients = state.clients.lock();
        if clients.contains_key(&name) {
            Err(Error::NameTaken(name.clone()))
        } else {
            clients.insert(
                name.clone(),
                Client {
                    conn,
                    stream: stream.try_clone().expect("clone registered stream"),
                    writer: writer.clone(),
                },
            );
            Ok(())
        }
    };
    let body = match &verdict {
        Ok(()) => json!({"ok": true}),
        Err(e) => error_value(e),
    };
    let ack = control_reply(&name, &hello.correlation_id, body);
    if write_frame(&mut *writer.lock(), &ack).is_err() || verdict.is_err() {
        if verdict.is_ok() {
            state.forget(&name, conn);
        }
        return;
    }

    while let Ok(Some(mut msg)) = read_frame(&mut reader) {
        // The broker, not the client, vouches for the sender name.
        msg.sender = name.clone();
        if msg.recipient == BROKER_NAME {
            if msg.kind == MessageKind::Request {
                let body = control(&state, &name, &msg.body);
                let _ = write_frame(&mut *writer.lock(), &control_reply(&name, &msg.correlation_id, body));
            }
            continue;
        }
        match msg.kind {
            MessageKind::Request | MessageKind::Reply => {
                if !state.deliver(&msg.recipient, &msg) && msg.kind == MessageKind::Request {
                    let body = json!({"op": "unreachable", "recipient": msg.recipient});
                    let _ = write_frame(&mut *writer.lock(), &control_reply(&name, &msg.correlation_id, body));
                }
            }
            // Publishes go through the control op so the sender learns the
            // delivered count.
            MessageKind::Event => {}
        }
    }
    state.forget(&name, conn);
}

fn control(state: &BrokerState, name: &str, body: &Value) -> Value {
    let op = body.get("op").and_then(Value::as_str).unwrap_or_default();
    let channel = body.get("channel").and_then(Value::as_str).unwrap_or_default().to_owned();
    match op {
        "subscribe" if !channel.is_empty() => {
            state.channels.lock().entry(channel).or_default().insert(name.to_owned());
            json!({"ok": true})
        }
        "unsubscribe" => {
            if let Some(set) = state.channels.lock().get_mut(&channel) {
                set.remove(name);
            }
            json!({"ok": true})
        }
        "publish" if !channel.is_empty() => {
            let msg = Message {
                correlation_id: body
                    .get("correlation_id")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_owned(),
                sender: name.to_owned(),
                recipient: channel.clone(),
                kind: MessageKind::Event,
                body: body.get("body").cloned().unwrap_or(Value::Null),
                sent_at: Timestamp::default(),
            };
            let members: Vec<String> = state
                .channels
                .lock()
                .get(&channel)
                .map(|s| s.iter().cloned().collect())
                .unwrap_or_default();
            let delivered = members.iter().filter(|m| state.deliver(m, &msg)).count();
            json!({"ok": true, "delivered": delivered})
        }
        _ => error_value(&Error::ProtocolError(format!("unknown control op `{op}`"))),
    }
}

struct TcpLink {
    name: String,
    stream: TcpStream,
    writer: Mutex<BufWriter<TcpStream>>,
    control: Arc<Mutex<HashMap<String, Sender<Value>>>>,
    closed: AtomicBool,
}

impl TcpLink {
    fn write(&self, msg: &Message) -> Result<()> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(Error::Unreachable(BROKER_NAME.into()));
        }
        write_frame(&mut *self.writer.lock(), msg).map_err(|_| Error::Unreachable(BROKER_NAME.into()))
    }

    fn call(&self, body: Value) -> Result<Value> {
        let id = random_hex128();
        let (tx, rx) = mpsc::channel();
        self.control.lock().insert(id.clone(), tx);
        let msg = Message {
            correlation_id: id.clone(),
            sender: self.name.clone(),
            recipient: BROKER_NAME.into(),
            kind: MessageKind::Request,
            body,
            sent_at: Timestamp::default(),
        };
        let outcome = self.write(&msg).and_then(|()| {
            rx.recv_timeout(CONTROL_TIMEOUT)
                .map_err(|_| Error::Timeout("bus broker did not answer".into()))
        });
        self.control.lock().remove(&id);
        let reply = outcome?;
        check_control(reply)
    }
}

fn check_control(reply: Value) -> Result<Value> {
    match reply.get("error") {
        Some(err) => {
            let body: ErrorBody =
                serde_json::from_value(err.clone()).map_err(|e| Error::ProtocolError(e.to_string()))?;
            Err(Error::from_body(&body))
        }
        None => Ok(reply),
    }
}

impl Link for TcpLink {
    fn send(&self, msg: Message) -> Result<()> {
        self.write(&msg)
    }

    fn publish(&self, msg: Message) -> Result<usize> {
        let reply = self.call(json!({
            "op": "publish",
            "channel": msg.recipient,
            "correlation_id": msg.correlation_id,
            "body": msg.body,
        }))?;
        Ok(reply.get("delivered").and_then(Value::as_u64).unwrap_or(0) as usize)
    }

    fn subscribe(&self, channel: &str) -> Result<()> {
        self.call(json!({"op": "subscribe", "channel": channel})).map(drop)
    }

    fn unsubscribe(&self, channel: &str) -> Result<()> {
        self.call(json!({"op": "unsubscribe", "channel": channel})).map(drop)
    }

    fn close(&self) {
        if !self.closed.swap(true, Ordering::SeqCst) {
            let _ = self.stream.shutdown(Shutdown::Both);
        }
    }
}

/// Connects a named session to a TCP broker.
pub fn connect_tcp(addr: impl ToSocketAddrs, name: &str) -> Result<Session> {
    let unreachable = |_| Error::Unreachable(BROKER_NAME.into());
    let stream = TcpStream::connect(addr).map_err(unreachable)?;
    let _ = stream.set_nodelay(true);
    let mut reader = BufReader::new(stream.try_clone().map_err(unreachable)?);
    let mut writer = BufWriter::new(stream.try_clone().map_err(unreachable)?);

    let hello = Message {
        correlation_id: random_hex128(),
        sender: name.to_owned(),
        recipient: BROKER_NAME.into(),
        kind: MessageKind::Request,
        body: json!({"op": "hello", "name": name}),
        sent_at: Timestamp::default(),
    };
    write_frame(&mut writer, &hello).map_err(unreachable)?;
    stream.set_read_timeout(Some(CONTROL_TIMEOUT)).map_err(unreachable)?;
    let ack = read_frame(&mut reader)
        .map_err(unreachable)?
        .ok_or_else(|| Error::Unreachable(BROKER_NAME.into()))?;
    stream.set_read_timeout(None).map_err(unreachable)?;
    check_control(ack.body)?;

    let core = SessionCore::new(name);
    let control = Arc::new(Mutex::new(HashMap::<String, Sender<Value>>::new()));
    let link = Arc::new(TcpLink {
        name: name.to_owned(),
        stream: stream.try_clone().map_err(unreachable)?,
        writer: Mutex::new(writer),
        control: control.clone(),
        closed: AtomicBool::new(false),
    });
    let reader_core = Arc::downgrade(&core);
    thread::Builder::new()
        .name(format!("bus-{name}-reader"))
        .spawn(move || {
            while let Ok(Some(msg)) = read_frame(&mut reader) {
                let Some(core) = reader_core.upgrade() else { break };
                if msg.sender == BROKER_NAME && msg.kind == MessageKind::Reply {
                    if let Some(tx) = control.lock().remove(&msg.correlation_id) {
                        let _ = tx.send(msg.body);
                        continue;
                    }
                    if msg.body.get("op").and_then(Value::as_str) == Some("unreachable") {
                        let recipient = msg.body.get("recipient").and_then(Value::as_str).unwrap_or_default();
                        core.undeliverable(&msg.correlation_id, recipient);
                        continue;
                    }
                }
                core.deliver(msg);
            }
            if let Some(core) = reader_core.upgrade() {
                core.disconnected();
            }
        })
        .map_err(|e| Error::Internal(e.to_string()))?;
    Ok(Session::new(core, link))
}
