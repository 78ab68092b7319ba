//! The claim loop every gateway agent runs.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::ids::RequestId;
use crate::store::{Request, Store};

/// A failed attempt; retryable ones go back to the queue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub error: Error,
    pub retryable: bool,
}

impl Failure {
    pub fn retry(error: Error) -> Self {
        Self { error, retryable: true }
    }

    pub fn fatal(error: Error) -> Self {
        Self {
            error,
            retryable: false,
        }
    }
}

impl From<Error> for Failure {
    /// Transport errors are worth another attempt, everything else is final.
    fn from(error: Error) -> Self {
        let retryable = error.is_transient() || matches!(error, Error::Storage(_));
        Self { error, retryable }
    }
}

/// Processes one claimed request. Must be idempotent: a request can be seen
/// again after a crash or an expired lease.
pub trait RequestHandler: Send + Sync {
    fn handle(&self, req: &Request) -> std::result::Result<Value, Failure>;
}

impl<F> RequestHandler for F
where
    F: Fn(&Request) -> std::result::Result<Value, Failure> + Send + Sync,
{
    fn handle(&self, req: &Request) -> std::result::Result<Value, Failure> {
        self(req)
    }
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub name: String,
    pub lease: Duration,
    pub poll_interval: Duration,
}

impl WorkerConfig {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            lease: Duration::from_secs(60),
            poll_interval: Duration::from_secs(1),
        }
    }
}

/// What happened to one claimed request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Processed {
    Completed(RequestId),
    Failed(RequestId),
    /// The handler panicked; the lease is left to run out.
    Crashed(RequestId),
    /// The lease was lost before the outcome could be recorded.
    Abandoned(RequestId),
}

pub struct Worker {
    store: Store,
    handler: Arc<dyn RequestHandler>,
    config: WorkerConfig,
}

impl Worker {
    pub fn new(store: Store, handler: Arc<dyn RequestHandler>, config: WorkerConfig) -> Self {
        Self { store, handler, config }
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.config
    }

    /// Claims and processes at most one request.
    pub fn run_once(&self) -> Result<Option<Processed>> {
        let name = &self.config.name;
        let Some(req) = self.store.claim_next(name, self.config.lease)? else {
            return Ok(None);
        };
        let req = match self.store.start(&req.id, name) {
            Ok(r) => r,
            Err(Error::LeaseLost(_)) => return Ok(Some(Processed::Abandoned(req.id))),
            Err(e) => return Err(e),
        };
        let id = req.id.clone();
        let done = Arc::new(AtomicBool::new(false));
        let renewer = self.spawn_renewer(&id, done.clone());
        let outcome = catch_unwind(AssertUnwindSafe(|| self.handler.handle(&req)));
        done.store(true, Ordering::SeqCst);
        if let Some(h) = renewer {
            h.thread().unpark();
            let _ = h.join();
        }
        let recorded = match outcome {
            Err(_) => {
                tracing::warn!(request = %id, agent = %name, "handler panicked");
                return Ok(Some(Processed::Crashed(id)));
            }
            Ok(Ok(value)) => self.store.complete(&id, name, value).map(|_| Processed::Completed(id.clone())),
            Ok(Err(f)) => self
                .store
                .fail(&id, name, f.error.to_body(), f.retryable)
                .map(|_| Processed::Failed(id.clone())),
        };
        match recorded {
            Ok(p) => Ok(Some(p)),
            Err(Error::LeaseLost(_)) => Ok(Some(Processed::Abandoned(id))),
            Err(e) => Err(e),
        }
    }

    fn spawn_renewer(&self, id: &RequestId, done: Arc<AtomicBool>) -> Option<thread::JoinHandle<()>> {
        let store = self.store.clone();
        let id = id.clone();
        let name = self.config.name.clone();
        let lease = self.config.lease;
        let every = lease / 3;
        thread::Builder::new()
            .name(format!("{name}-lease"))
            .spawn(move || loop {
                thread::park_timeout(every);
                if done.load(Ordering::SeqCst) {
                    return;
                }
                if store.renew_lease(&id, &name, lease).is_err() {
                    return;
                }
            })
            .ok()
    }

    /// Polls until `stop` is set.
    pub fn run(&self, stop: &AtomicBool) {
        while !stop.load(Ordering::SeqCst) {
            match self.run_once() {
                Ok(Some(_)) => continue,
                Ok(None) => {}
                Err(e) => tracing::error!(agent = %self.config.name, error = %e, "queue access failed"),
            }
            let mut left = self.config.poll_interval;
            let tick = Duration::from_millis(20);
            while !left.is_zero() && !stop.load(Ordering::SeqCst) {
                let nap = left.min(tick);
                thread::sleep(nap);
                left -= nap;
            }
        }
    }
}
