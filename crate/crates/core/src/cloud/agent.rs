use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde_json::Value;

use super::descriptor::{acl_allows, CloudDescriptor, LocalFlavor};
use super::driver::{CloudDriver, DriverState, Resources};
use super::protocol::{error_reply, ok_reply, CapacityReport, CloudRequest, Started, StateReport, CAPACITY_CHANNEL};
use crate::bus::Session;
use crate::cluster::OfferingTriple;
use crate::error::{Error, Result};
use crate::principal::Principal;

/// Local identifiers an admitted start will use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Admission {
    pub template: String,
    pub flavor: LocalFlavor,
    pub resources: Resources,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LifecycleAction {
    Pause,
    Resume,
    Destroy,
}

#[derive(Debug, Default)]
struct Book {
    /// Starts admitted whose driver call has not returned yet.
    pending: u32,
    pending_res: Resources,
    /// Live instances by driver ref.
    live: BTreeMap<String, Resources>,
}

impl Book {
    fn instances(&self) -> u32 {
        self.pending + self.live.len() as u32
    }

    fn used(&self) -> Resources {
        let mut r = self.pending_res;
        for h in self.live.values() {
            r.cpus += h.cpus;
            r.memory_mb += h.memory_mb;
        }
        r
    }
}

/// One per connected cloud: admission control in front of a driver.
pub struct CloudAgent {
    descriptor: CloudDescriptor,
    driver: Arc<dyn CloudDriver>,
    book: Mutex<Book>,
}

impl std::fmt::Debug for CloudAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CloudAgent")
            .field("cloud_id", &self.descriptor.cloud_id)
            .finish_non_exhaustive()
    }
}

impl CloudAgent {
    pub fn new(descriptor: CloudDescriptor, driver: Arc<dyn CloudDriver>) -> Self {
        Self {
            descriptor,
            driver,
            book: Mutex::new(Book::default()),
        }
    }

    pub fn cloud_id(&self) -> &str {
        &self.descriptor.cloud_id
    }

    pub fn descriptor(&self) -> &CloudDescriptor {
        &self.descriptor
    }

    /// Live plus starting instances.
    pub fn instances_held(&self) -> u32 {
        self.book.lock().instances()
    }

    fn check(&self, book: &Book, who: &Principal, image_id: &str, offerings: &OfferingTriple) -> Result<Admission> {
        let q = &self.descriptor.quotas;
        if !acl_allows(&self.descriptor.acl, who) {
            return Err(Error::AclDenied);
        }
        if book.instances() >= q.max_instances {
            return Err(Error::QuotaExceeded(format!("max_instances {}", q.max_instances)));
        }
        let template = self
            .descriptor
            .local_template(image_id)
            .ok_or_else(|| Error::Unsupported(format!("image {image_id}")))?
            .to_owned();
        let flavor = self
            .descriptor
            .local_flavor(offerings)
            .ok_or_else(|| Error::Unsupported(format!("offerings {offerings}")))?;
        let resources = self
            .driver
            .flavor_resources(&flavor.compute)
            .ok_or_else(|| Error::Unsupported(format!("offerings {offerings}")))?;
        let used = book.used();
        if u64::from(used.cpus) + u64::from(resources.cpus) > u64::from(q.max_cpus) {
            return Err(Error::QuotaExceeded(format!("max_cpus {}", q.max_cpus)));
        }
        if used.memory_mb.saturating_add(resources.memory_mb) > q.max_memory_mb {
            return Err(Error::QuotaExceeded(format!("max_memory_mb {}", q.max_memory_mb)));
        }
        Ok(Admission {
            template,
            flavor,
            resources,
        })
    }

    /// Checks ACL, instance quota, mappings, then cpu and memory quota.
    pub fn admit(&self, who: &Principal, image_id: &str, offerings: &OfferingTriple) -> Result<Admission> {
        self.check(&self.book.lock(), who, image_id, offerings)
    }

    pub fn start_instance(
        &self,
        who: &Principal,
        image_id: &str,
        offerings: &OfferingTriple,
        user_data: &str,
    ) -> Result<String> {
        let admission = {
            let mut book = self.book.lock();
            let a = self.check(&book, who, image_id, offerings)?;
            book.pending += 1;
            book.pending_res.cpus += a.resources.cpus;
            book.pending_res.memory_mb += a.resources.memory_mb;
            a
        };
        let outcome = self.driver.start(&admission.template, &admission.flavor, user_data);
        let mut book = self.book.lock();
        book.pending -= 1;
        book.pending_res.cpus -= admission.resources.cpus;
        book.pending_res.memory_mb -= admission.resources.memory_mb;
        let driver_ref = outcome?;
        book.live.insert(driver_ref.clone(), admission.resources);
        Ok(driver_ref)
    }

    pub fn lifecycle(&self, driver_ref: &str, action: LifecycleAction) -> Result<DriverState> {
        match action {
            LifecycleAction::Pause => self.driver.pause(driver_ref)?,
            LifecycleAction::Resume => self.driver.resume(driver_ref)?,
            LifecycleAction::Destroy => {
                self.driver.destroy(driver_ref)?;
                self.book.lock().live.remove(driver_ref);
            }
        }
        self.driver.status(driver_ref)
    }

    pub fn status(&self, driver_ref: &str) -> Result<DriverState> {
        self.driver.status(driver_ref)
    }

    /// For each triple: the smaller of what the driver can fit and what the
    /// quota still allows. Zero for a principal the ACL refuses.
    pub fn report_capacity(&self, who: &Principal, offerings: &[OfferingTriple]) -> CapacityReport {
        let allowed = acl_allows(&self.descriptor.acl, who);
        let book = self.book.lock();
        let q = self.descriptor.quotas;
        let used = book.used();
        let free_slots = offerings
            .iter()
            .map(|t| {
                let slots = if allowed { self.slots_for(&book, used, q, t) } else { 0 };
                (t.clone(), slots)
            })
            .collect();
        CapacityReport {
            cloud_id: self.descriptor.cloud_id.clone(),
            free_slots,
        }
    }

    fn slots_for(&self, book: &Book, used: Resources, q: super::Quotas, t: &OfferingTriple) -> u32 {
        let Some(flavor) = self.descriptor.local_flavor(t) else { return 0 };
        let Some(need) = self.driver.flavor_resources(&flavor.compute) else { return 0 };
        let by_driver = self.driver.capacity(&flavor).unwrap_or(0);
        let by_count = q.max_instances.saturating_sub(book.instances());
        let by_cpu = q
            .max_cpus
            .saturating_sub(used.cpus)
            .checked_div(need.cpus)
            .unwrap_or(u32::MAX);
        let by_mem = q
            .max_memory_mb
            .saturating_sub(used.memory_mb)
            .checked_div(need.memory_mb)
            .unwrap_or(u64::MAX)
            .min(u64::from(u32::MAX)) as u32;
        by_driver.min(by_count).min(by_cpu).min(by_mem)
    }

    /// Answers one bus body.
    pub fn handle(&self, body: &Value) -> Value {
        let req: CloudRequest = match serde_json::from_value(body.clone()) {
            Ok(r) => r,
            Err(e) => return error_reply(&Error::ProtocolError(e.to_string())),
        };
        let outcome = match req {
            CloudRequest::Capacity { principal, offerings } => Ok(ok_reply(&self.report_capacity(&principal, &offerings))),
            CloudRequest::Start {
                principal,
                image_id,
                offerings,
                user_data,
            } => self
                .start_instance(&principal, &image_id, &offerings, &user_data)
                .map(|driver_ref| ok_reply(&Started { driver_ref })),
            CloudRequest::Pause { driver_ref } => self.lifecycle(&driver_ref, LifecycleAction::Pause).map(state_reply),
            CloudRequest::Resume { driver_ref } => self.lifecycle(&driver_ref, LifecycleAction::Resume).map(state_reply),
            CloudRequest::Destroy { driver_ref } => {
                self.lifecycle(&driver_ref, LifecycleAction::Destroy).map(state_reply)
            }
            CloudRequest::Status { driver_ref } => self.status(&driver_ref).map(state_reply),
        };
        outcome.unwrap_or_else(|e| error_reply(&e))
    }

    /// Answers directed requests and capacity discovery on `session`.
    pub fn serve(self: &Arc<Self>, session: &Session) -> Result<()> {
        let me = self.clone();
        session.serve(move |m| me.handle(&m.body));
        let me = self.clone();
        session.subscribe(CAPACITY_CHANNEL, move |m| Some(me.handle(&m.body)))
    }
}

fn state_reply(state: DriverState) -> Value {
    ok_reply(&StateReport { state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::MemoryHub;
    use crate::clock::{ManualClock, Timestamp};
    use crate::cloud::protocol::{agent_bus_name, parse_reply};
    use crate::cloud::sim::{SimConfig, SimulatedCloud};
    use crate::cloud::{AclRule, Quotas};
    use serde_json::json;
    use std::time::Duration;

    fn triple() -> OfferingTriple {
        OfferingTriple::new("m1.small", "disk-20", "public")
    }

    fn descriptor(max_instances: u32) -> CloudDescriptor {
        CloudDescriptor::new(
            "A",
            Quotas {
                max_instances,
                max_cpus: 64,
                max_memory_mb: 1 << 20,
            },
        )
        .map_image("cernvm-3", "tmpl-cernvm-3.1")
        .map_offering("m1.small", "small")
        .map_offering("disk-20", "dsk20")
        .map_offering("public", "net0")
    }

    fn agent(max_instances: u32, slots: u32) -> (Arc<CloudAgent>, Arc<SimulatedCloud>) {
        let clock = ManualClock::new(Timestamp(0));
        let sim = Arc::new(SimulatedCloud::new(SimConfig::uniform(slots, "small"), clock.shared()));
        (Arc::new(CloudAgent::new(descriptor(max_instances), sim.clone())), sim)
    }

    fn alice() -> Principal {
        Principal::new("alice")
    }

    #[test]
    fn admits_mapped_request() {
        let (a, _) = agent(5, 8);
        let adm = a.admit(&alice(), "cernvm-3", &triple()).unwrap();
        assert_eq!(adm.template, "tmpl-cernvm-3.1");
        assert_eq!(adm.flavor.compute, "small");
    }

    #[test]
    fn quota_counts_live_instances() {
        let (a, _) = agent(2, 8);
        for _ in 0..2 {
            a.start_instance(&alice(), "cernvm-3", &triple(), "").unwrap();
        }
        assert!(matches!(
            a.start_instance(&alice(), "cernvm-3", &triple(), ""),
            Err(Error::QuotaExceeded(_))
        ));
    }

    #[test]
    fn unmapped_is_unsupported() {
        let (a, _) = agent(2, 8);
        let odd = OfferingTriple::new("m1.huge", "disk-20", "public");
        assert!(matches!(a.admit(&alice(), "cernvm-3", &odd), Err(Error::Unsupported(_))));
        assert!(matches!(a.admit(&alice(), "slc5", &triple()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn check_order_acl_then_quota_then_mapping() {
        let clock = ManualClock::new(Timestamp(0));
        let sim = Arc::new(SimulatedCloud::new(SimConfig::uniform(8, "small"), clock.shared()));
        let d = descriptor(0).with_acl(vec![AclRule::allow("user:alice")]);
        let a = CloudAgent::new(d, sim);
        let odd = OfferingTriple::new("nope", "nope", "nope");
        assert_eq!(a.admit(&Principal::new("bob"), "x", &odd).unwrap_err(), Error::AclDenied);
        assert!(matches!(a.admit(&alice(), "x", &odd), Err(Error::QuotaExceeded(_))));
    }

    #[test]
    fn driver_failure_releases_reservation() {
        let clock = ManualClock::new(Timestamp(0));
        let sim = Arc::new(SimulatedCloud::new(
            SimConfig::uniform(8, "small").failing_at([1]),
            clock.shared(),
        ));
        let a = CloudAgent::new(descriptor(1), sim.clone());
        assert!(matches!(
            a.start_instance(&alice(), "cernvm-3", &triple(), ""),
            Err(Error::DriverFailure(_))
        ));
        assert_eq!(a.instances_held(), 0);
        assert_eq!(sim.held(), Resources::default());
        a.start_instance(&alice(), "cernvm-3", &triple(), "").unwrap();
    }

    #[test]
    fn capacity_is_min_of_driver_and_quota() {
        let (a, _) = agent(5, 8);
        assert_eq!(a.report_capacity(&alice(), &[triple()]).slots(&triple()), 5);
        let (a, _) = agent(50, 8);
        assert_eq!(a.report_capacity(&alice(), &[triple()]).slots(&triple()), 8);
        for _ in 0..8 {
            a.start_instance(&alice(), "cernvm-3", &triple(), "").unwrap();
        }
        assert_eq!(a.report_capacity(&alice(), &[triple()]).slots(&triple()), 0);
    }

    #[test]
    fn denied_principal_sees_zero() {
        let clock = ManualClock::new(Timestamp(0));
        let sim = Arc::new(SimulatedCloud::new(SimConfig::uniform(8, "small"), clock.shared()));
        let a = CloudAgent::new(descriptor(5).with_acl(vec![AclRule::deny("user:eve"), AclRule::allow("*")]), sim);
        assert_eq!(a.report_capacity(&Principal::new("eve"), &[triple()]).slots(&triple()), 0);
        assert_eq!(a.report_capacity(&alice(), &[triple()]).slots(&triple()), 5);
    }

    #[test]
    fn destroy_releases_capacity_and_is_idempotent() {
        let (a, _) = agent(10, 3);
        let r = a.start_instance(&alice(), "cernvm-3", &triple(), "").unwrap();
        let before = a.report_capacity(&alice(), &[triple()]).slots(&triple());
        assert_eq!(a.lifecycle(&r, LifecycleAction::Destroy).unwrap(), DriverState::Destroyed);
        assert_eq!(a.lifecycle(&r, LifecycleAction::Destroy).unwrap(), DriverState::Destroyed);
        let after = a.report_capacity(&alice(), &[triple()]).slots(&triple());
        assert_eq!(after, before + 1);
        assert!(matches!(a.lifecycle("vm-x", LifecycleAction::Pause), Err(Error::UnknownRef(_))));
    }

    #[test]
    fn start_storm_respects_quota() {
        let (a, _) = agent(5, 100);
        let results: Vec<Result<String>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..16)
                .map(|_| s.spawn(|| a.start_instance(&alice(), "cernvm-3", &triple(), "")))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 5);
        assert!(results
            .iter()
            .filter_map(|r| r.as_ref().err())
            .all(|e| matches!(e, Error::QuotaExceeded(_))));
    }

    #[test]
    fn serves_over_bus_and_survives_garbage() {
        let hub = MemoryHub::default();
        let (a, _) = agent(5, 8);
        let session = hub.connect(&agent_bus_name("A")).unwrap();
        a.serve(&session).unwrap();
        let gw = hub.connect("gw").unwrap();
        let t = Duration::from_secs(5);

        let reply = gw.request("cloud-A", json!({"verb": "launch"}), t).unwrap();
        assert!(matches!(parse_reply::<Value>(reply), Err(Error::ProtocolError(_))));
        let reply = gw.request("cloud-A", json!("not even an object"), t).unwrap();
        assert!(matches!(parse_reply::<Value>(reply), Err(Error::ProtocolError(_))));

        let start = serde_json::to_value(CloudRequest::Start {
            principal: alice(),
            image_id: "cernvm-3".into(),
            offerings: triple(),
            user_data: "[amiconfig]\nplugins =\n".into(),
        })
        .unwrap();
        let started: Started = parse_reply(gw.request("cloud-A", start, t).unwrap()).unwrap();
        assert!(started.driver_ref.starts_with("vm-"));

        let discovery = serde_json::to_value(CloudRequest::Capacity {
            principal: alice(),
            offerings: vec![triple()],
        })
        .unwrap();
        let replies = gw.gather(CAPACITY_CHANNEL, discovery, t).unwrap();
        assert_eq!(replies.len(), 1);
        let report: CapacityReport = parse_reply(replies[0].body.clone()).unwrap();
        assert_eq!(report.slots(&triple()), 4);
    }
}
