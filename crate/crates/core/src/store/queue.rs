//! The durable request queue. Agents claim requests under a time-bounded
//! lease; a request whose lease runs out becomes claimable again.

use std::collections::HashSet;
use std::time::Duration;

use super::{LeaseRecord, NewRequest, QueueConfig, Request, RequestPayload, RequestState, Store, Tables};
use crate::clock::Timestamp;
use crate::error::{Error, ErrorBody, Result};
use crate::ids::{ClusterId, RequestId};

fn idempotency_slot(user: &str, key: &str) -> String {
    format!("{user}\n{key}")
}

impl Tables {
    /// Inserts a request, or returns the one already created under the same
    /// idempotency key by the same user.
    pub(crate) fn enqueue(&mut self, new: NewRequest, now: Timestamp) -> (Request, bool) {
        if let Some(key) = &new.idempotency_key {
            let slot = idempotency_slot(&new.principal.user, key);
            if let Some(existing) = self.idempotency.get(&slot).and_then(|id| self.requests.get(id)) {
                return (existing.clone(), false);
            }
        }
        let seq = self.next_seq();
        let req = Request {
            id: RequestId::random(),
            payload: new.payload,
            principal: new.principal,
            state: RequestState::New,
            claimed_by: None,
            lease_expires_at: None,
            attempts: 0,
            idempotency_key: new.idempotency_key,
            result: None,
            error: None,
            not_before: None,
            seq,
            created_at: now,
            updated_at: now,
            leases: Vec::new(),
        };
        if let Some(key) = &req.idempotency_key {
            self.idempotency
                .insert(idempotency_slot(&req.principal.user, key), req.id.clone());
        }
        self.requests.insert(req.id.clone(), req.clone());
        (req, true)
    }

    /// The stored cluster a request acts on, if any.
    fn serialization_key(&self, req: &Request) -> Option<&ClusterId> {
        let id = match &req.payload {
            RequestPayload::PauseInstance { instance_id }
            | RequestPayload::ResumeInstance { instance_id }
            | RequestPayload::DestroyInstance { instance_id } => &self.instances.get(instance_id)?.cluster_id,
            other => other.cluster_id()?,
        };
        self.clusters.get_key_value(id).map(|(k, _)| k)
    }

    pub(crate) fn idempotent_request(&self, user: &str, key: Option<&str>) -> Option<&Request> {
        let slot = idempotency_slot(user, key?);
        self.idempotency.get(&slot).and_then(|id| self.requests.get(id))
    }
}

fn lease_lost(req: &Request) -> Error {
    Error::LeaseLost(req.id.to_string())
}

/// The request must be leased by `agent` with time left on the lease.
fn held_by<'a>(t: &'a mut Tables, id: &RequestId, agent: &str, now: Timestamp) -> Result<&'a mut Request> {
    let req = t
        .requests
        .get_mut(id)
        .ok_or_else(|| Error::NotFound(format!("request {id}")))?;
    let holds = req.state.is_leased()
        && req.claimed_by.as_deref() == Some(agent)
        && req.lease_expires_at.is_some_and(|exp| now < exp);
    if holds {
        Ok(req)
    } else {
        Err(lease_lost(req))
    }
}

fn release(req: &mut Request, now: Timestamp) {
    if let Some(last) = req.leases.last_mut() {
        last.released_at.get_or_insert(now);
    }
    req.claimed_by = None;
    req.lease_expires_at = None;
}

impl Store {
    pub fn enqueue(&self, new: NewRequest) -> Result<Request> {
        let now = self.now();
        self.write(|t| Ok(t.enqueue(new, now).0))
    }

    pub fn get_request(&self, id: &RequestId) -> Result<Request> {
        self.read(|t| {
            t.requests
                .get(id)
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("request {id}")))
        })
    }

    /// All requests in enqueue order.
    pub fn requests(&self) -> Result<Vec<Request>> {
        self.read(|t| {
            let mut v: Vec<Request> = t.requests.values().cloned().collect();
            v.sort_by_key(|r| r.seq);
            Ok(v)
        })
    }

    /// Leases the oldest claimable request to `agent`.
    ///
    /// Claimable means NEW and past its retry delay, or leased with the
    /// lease run out. An expired lease that has used up its attempts is
    /// failed instead. Requests against one stored cluster are handed out
    /// one at a time, in enqueue order.
    pub fn claim_next(&self, agent: &str, lease: Duration) -> Result<Option<Request>> {
        let now = self.now();
        let max_attempts = self.queue.max_attempts;
        self.write(|t| {
            for req in t.requests.values_mut() {
                let expired = req.state.is_leased() && req.lease_expires_at.is_none_or(|exp| now >= exp);
                if expired && req.attempts >= max_attempts {
                    release(req, now);
                    req.state = RequestState::Failed;
                    req.error = Some(ErrorBody::new(
                        "LEASE_EXPIRED",
                        format!("lease expired after {} attempts", req.attempts),
                    ));
                    req.updated_at = now;
                }
            }
            let mut order: Vec<&Request> = t.requests.values().filter(|r| !r.state.is_final()).collect();
            order.sort_by_key(|r| r.seq);
            let mut busy = HashSet::new();
            let mut best = None;
            for req in order {
                let cluster = t.serialization_key(req);
                if cluster.is_some_and(|c| busy.contains(c)) {
                    continue;
                }
                let expired = req.state.is_leased() && req.lease_expires_at.is_none_or(|exp| now >= exp);
                let ready = req.state == RequestState::New && req.not_before.is_none_or(|nb| now >= nb);
                if ready || expired {
                    best = Some(req.id.clone());
                    break;
                }
                if let Some(c) = cluster {
                    busy.insert(c);
                }
            }
            let Some(id) = best else { return Ok(None) };
            let req = t.requests.get_mut(&id).expect("selected above");
            if let Some(last) = req.leases.last_mut() {
                last.released_at.get_or_insert(last.lease_expires_at);
            }
            let expires = now + lease;
            req.state = RequestState::Claimed;
            req.claimed_by = Some(agent.to_owned());
            req.lease_expires_at = Some(expires);
            req.attempts += 1;
            req.not_before = None;
            req.updated_at = now;
            req.leases.push(LeaseRecord {
                agent: agent.to_owned(),
                claimed_at: now,
                lease_expires_at: expires,
                released_at: None,
            });
            Ok(Some(req.clone()))
        })
    }

    pub fn start(&self, id: &RequestId, agent: &str) -> Result<Request> {
        let now = self.now();
        self.write(|t| {
            let req = held_by(t, id, agent, now)?;
            req.state = RequestState::InProgress;
            req.updated_at = now;
            Ok(req.clone())
        })
    }

    pub fn renew_lease(&self, id: &RequestId, agent: &str, lease: Duration) -> Result<Request> {
        let now = self.now();
        self.write(|t| {
            let req = held_by(t, id, agent, now)?;
            let expires = now + lease;
            req.lease_expires_at = Some(expires);
            if let Some(last) = req.leases.last_mut() {
                last.lease_expires_at = expires;
            }
            req.updated_at = now;
            Ok(req.clone())
        })
    }

    pub fn complete(&self, id: &RequestId, agent: &str, result: serde_json::Value) -> Result<Request> {
        let now = self.now();
        self.write(|t| {
            let req = held_by(t, id, agent, now)?;
            release(req, now);
            req.state = RequestState::Done;
            req.result = Some(result);
            req.error = None;
            req.updated_at = now;
            Ok(req.clone())
        })
    }

    /// Records a failed attempt. Retryable failures with attempts left go
    /// back to NEW after the retry delay.
    pub fn fail(&self, id: &RequestId, agent: &str, error: ErrorBody, retryable: bool) -> Result<Request> {
        let now = self.now();
        let QueueConfig { max_attempts, retry_delay } = self.queue;
        self.write(|t| {
            let req = held_by(t, id, agent, now)?;
            release(req, now);
            if retryable && req.attempts < max_attempts {
                req.state = RequestState::New;
                req.not_before = Some(now + retry_delay);
            } else {
                req.state = RequestState::Failed;
            }
            req.error = Some(error);
            req.updated_at = now;
            Ok(req.clone())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::ids::ClusterId;
    use crate::principal::Principal;
    use crate::store::RequestPayload;

    const LEASE: Duration = Duration::from_secs(10);

    fn store() -> (Store, ManualClock) {
        let clock = ManualClock::new(Timestamp(1_000));
        (Store::memory(clock.shared()), clock)
    }

    fn new_req(n: u32) -> NewRequest {
        NewRequest::new(
            RequestPayload::ScaleService {
                cluster_id: ClusterId::from("c"),
                service: "w".into(),
                target: n,
                delta: 0,
            },
            Principal::new("alice"),
        )
    }

    fn err() -> ErrorBody {
        ErrorBody::new("DRIVER_FAILURE", "boom")
    }

    #[test]
    fn fifo_claims() {
        let (s, _) = store();
        let a = s.enqueue(new_req(1)).unwrap();
        let b = s.enqueue(new_req(2)).unwrap();
        assert_eq!(s.claim_next("g1", LEASE).unwrap().unwrap().id, a.id);
        assert_eq!(s.claim_next("g2", LEASE).unwrap().unwrap().id, b.id);
        assert!(s.claim_next("g3", LEASE).unwrap().is_none());
    }

    #[test]
    fn idempotency_key_is_per_user() {
        let (s, _) = store();
        let a = s.enqueue(new_req(1).with_idempotency_key(Some("k".into()))).unwrap();
        let again = s.enqueue(new_req(9).with_idempotency_key(Some("k".into()))).unwrap();
        assert_eq!(a.id, again.id);
        let mut other = new_req(1).with_idempotency_key(Some("k".into()));
        other.principal = Principal::new("bob");
        assert_ne!(s.enqueue(other).unwrap().id, a.id);
        assert_eq!(s.requests().unwrap().len(), 2);
    }

    #[test]
    fn retryable_failures_then_final() {
        let (s, clock) = store();
        let r = s.enqueue(new_req(1)).unwrap();
        for attempt in 1..=2 {
            let c = s.claim_next("g", LEASE).unwrap().unwrap();
            assert_eq!(c.attempts, attempt);
            let after = s.fail(&r.id, "g", err(), true).unwrap();
            assert_eq!(after.state, RequestState::New);
            assert_eq!(after.attempts, attempt);
            assert!(s.claim_next("g", LEASE).unwrap().is_none(), "retry delay respected");
            clock.advance(s.queue_config().retry_delay);
        }
        s.claim_next("g", LEASE).unwrap().unwrap();
        let last = s.fail(&r.id, "g", err(), true).unwrap();
        assert_eq!(last.state, RequestState::Failed);
        assert_eq!(last.attempts, 3);
        assert_eq!(last.error.unwrap().code, "DRIVER_FAILURE");
    }

    #[test]
    fn non_retryable_failure_is_final() {
        let (s, _) = store();
        let r = s.enqueue(new_req(1)).unwrap();
        s.claim_next("g", LEASE).unwrap();
        assert_eq!(s.fail(&r.id, "g", err(), false).unwrap().state, RequestState::Failed);
    }

    #[test]
    fn expired_lease_is_reclaimed_and_old_holder_loses() {
        let (s, clock) = store();
        let r = s.enqueue(new_req(1)).unwrap();
        s.claim_next("g1", LEASE).unwrap().unwrap();
        s.start(&r.id, "g1").unwrap();
        clock.advance(LEASE);
        assert!(matches!(s.renew_lease(&r.id, "g1", LEASE), Err(Error::LeaseLost(_))));
        let c = s.claim_next("g2", LEASE).unwrap().unwrap();
        assert_eq!(c.claimed_by.as_deref(), Some("g2"));
        assert_eq!(c.attempts, 2);
        assert!(matches!(s.complete(&r.id, "g1", serde_json::json!({})), Err(Error::LeaseLost(_))));
        assert_eq!(s.complete(&r.id, "g2", serde_json::json!({"ok":1})).unwrap().state, RequestState::Done);
    }

    #[test]
    fn renewal_extends_lease() {
        let (s, clock) = store();
        let r = s.enqueue(new_req(1)).unwrap();
        s.claim_next("g1", LEASE).unwrap();
        clock.advance(Duration::from_secs(8));
        s.renew_lease(&r.id, "g1", LEASE).unwrap();
        clock.advance(Duration::from_secs(8));
        assert!(s.claim_next("g2", LEASE).unwrap().is_none());
        s.complete(&r.id, "g1", serde_json::Value::Null).unwrap();
    }

    #[test]
    fn exhausted_expired_lease_fails() {
        let (s, clock) = store();
        let s = s.with_queue_config(QueueConfig {
            max_attempts: 2,
            retry_delay: Duration::ZERO,
        });
        let r = s.enqueue(new_req(1)).unwrap();
        for _ in 0..2 {
            s.claim_next("g", LEASE).unwrap().unwrap();
            clock.advance(LEASE);
        }
        assert!(s.claim_next("g", LEASE).unwrap().is_none());
        let r = s.get_request(&r.id).unwrap();
        assert_eq!(r.state, RequestState::Failed);
        assert_eq!(r.error.unwrap().code, "LEASE_EXPIRED");
    }

    #[test]
    fn lease_records_do_not_overlap() {
        let (s, clock) = store();
        let r = s.enqueue(new_req(1)).unwrap();
        s.claim_next("g1", LEASE).unwrap();
        clock.advance(Duration::from_secs(3));
        s.fail(&r.id, "g1", err(), true).unwrap();
        clock.advance(Duration::from_secs(1));
        s.claim_next("g2", LEASE).unwrap().unwrap();
        clock.advance(LEASE);
        s.claim_next("g3", LEASE).unwrap().unwrap();
        let leases = s.get_request(&r.id).unwrap().leases;
        assert_eq!(leases.len(), 3);
        for w in leases.windows(2) {
            assert!(w[0].effective_end() <= w[1].claimed_at);
        }
    }

    #[test]
    fn concurrent_claimers_never_share() {
        let (s, _) = store();
        for i in 0..200 {
            s.enqueue(new_req(i)).unwrap();
        }
        let claimed = parking_lot::Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for g in 0..4 {
                let s = s.clone();
                let claimed = &claimed;
                scope.spawn(move || {
                    let agent = format!("g{g}");
                    while let Some(r) = s.claim_next(&agent, LEASE).unwrap() {
                        s.complete(&r.id, &agent, serde_json::Value::Null).unwrap();
                        claimed.lock().push(r.id);
                    }
                });
            }
        });
        let mut ids = claimed.into_inner();
        ids.sort();
        let n = ids.len();
        ids.dedup();
        assert_eq!(n, 200);
        assert_eq!(ids.len(), 200);
    }
}
